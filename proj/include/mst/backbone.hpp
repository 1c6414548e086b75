#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "mst/autodiff.hpp"
#include "mst/config.hpp"
#include "mst/nn.hpp"

namespace mst {

// Joint template+search token sequence on a tape: template tokens first, then search tokens.
struct TokenSequence {
  Var tokens;  // [L, D]
  Grid template_grid;
  Grid search_grid;

  std::size_t template_len() const { return template_grid.cells(); }
  std::size_t search_len() const { return search_grid.cells(); }
  std::size_t length() const { return template_len() + search_len(); }
  std::vector<Grid> grids() const { return {template_grid, search_grid}; }

  void check() const {
    if (tokens.dim(0) != length()) {
      throw GeometryError("token sequence has " + std::to_string(tokens.dim(0)) + " tokens but grids cover " +
                          std::to_string(length()));
    }
  }
};

// Tapped backbone layers, shallowest first.
struct StateBundle {
  std::vector<TokenSequence> states;
};

enum class ImageRole { Template, Search };

struct PatchEmbedWeights {
  LinearWeights proj;     // [D, p*p*3]
  Tensor pos_template;    // [M, D]
  Tensor pos_search;      // [N_s, D]

  static PatchEmbedWeights init(const TrackerConfig& c, std::mt19937_64& rng) {
    PatchEmbedWeights w;
    w.proj = LinearWeights::init(c.patch_size * c.patch_size * 3, c.embed_dim, rng);
    w.pos_template = Tensor::randn({c.template_tokens(), c.embed_dim}, rng, 0.02);
    w.pos_search = Tensor::randn({c.search_tokens(), c.embed_dim}, rng, 0.02);
    return w;
  }

  void visit(const std::string& prefix, const TensorVisitor& fn) {
    proj.visit(prefix + ".proj", fn);
    fn(prefix + ".pos_template", pos_template);
    fn(prefix + ".pos_search", pos_search);
  }
};

// Flattens non-overlapping patch x patch blocks of an [H, W, 3] image, row-major over
// patches and (y, x, channel) inside each patch.
inline Tensor extract_patches(const Tensor& image, std::size_t patch) {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw DimensionError("expected an [H, W, 3] image, got " + shape_str(image.shape()));
  }
  const std::size_t h = image.dim(0), w = image.dim(1);
  if (h % patch || w % patch) throw ConfigError("image size not divisible by patch size");
  const std::size_t gh = h / patch, gw = w / patch, pd = patch * patch * 3;
  Tensor out({gh * gw, pd});
  for (std::size_t py = 0; py < gh; ++py) {
    for (std::size_t px = 0; px < gw; ++px) {
      real* dst = out.storage().data() + (py * gw + px) * pd;
      for (std::size_t y = 0; y < patch; ++y) {
        const real* src = image.storage().data() + ((py * patch + y) * w + px * patch) * 3;
        std::copy(src, src + patch * 3, dst + y * patch * 3);
      }
    }
  }
  return out;
}

// p_i = W_p v_i + b_p plus the role's learned position embedding.
inline Var patch_embed(Tape& tape, const Tensor& image, ImageRole role, const PatchEmbedWeights& w,
                       const TrackerConfig& c) {
  const std::size_t expected = role == ImageRole::Template ? c.template_size : c.search_size;
  if (image.rank() != 3 || image.dim(0) != expected || image.dim(1) != expected) {
    throw ConfigError(std::string(role == ImageRole::Template ? "template" : "search") + " image must be " +
                      std::to_string(expected) + "x" + std::to_string(expected) + "x3, got " +
                      shape_str(image.shape()));
  }
  Var patches = tape.constant(extract_patches(image, c.patch_size));
  Var tokens = w.proj(patches);
  const Tensor& pos = role == ImageRole::Template ? w.pos_template : w.pos_search;
  return add(tokens, tape.param(pos));
}

struct AttentionWeights {
  NormWeights norm1;
  LinearWeights q;     // D -> D
  LinearWeights k;     // D -> D, no bias: a key bias shifts every score of a query equally
  LinearWeights v;     // D -> D
  LinearWeights proj;  // D -> D
  NormWeights norm2;
  LinearWeights fc1;   // D -> hidden
  LinearWeights fc2;   // hidden -> D

  static AttentionWeights init(const TrackerConfig& c, std::mt19937_64& rng) {
    AttentionWeights w;
    w.norm1 = NormWeights::init(c.embed_dim);
    w.q = LinearWeights::init(c.embed_dim, c.embed_dim, rng);
    w.k = LinearWeights::init(c.embed_dim, c.embed_dim, rng, 0.02, false);
    w.v = LinearWeights::init(c.embed_dim, c.embed_dim, rng);
    w.proj = LinearWeights::init(c.embed_dim, c.embed_dim, rng);
    w.norm2 = NormWeights::init(c.embed_dim);
    w.fc1 = LinearWeights::init(c.embed_dim, c.mlp_hidden(), rng);
    w.fc2 = LinearWeights::init(c.mlp_hidden(), c.embed_dim, rng);
    return w;
  }

  void visit(const std::string& prefix, const TensorVisitor& fn) {
    norm1.visit(prefix + ".norm1", fn);
    q.visit(prefix + ".q", fn);
    k.visit(prefix + ".k", fn);
    v.visit(prefix + ".v", fn);
    proj.visit(prefix + ".proj", fn);
    norm2.visit(prefix + ".norm2", fn);
    fc1.visit(prefix + ".fc1", fn);
    fc2.visit(prefix + ".fc2", fn);
  }
};

// softmax(Q Kᵀ / sqrt(d_k)) V per head, heads concatenated along channels.
inline Var multi_head_attention(const Var& q, const Var& k, const Var& v, std::size_t num_heads) {
  const std::size_t d = q.dim(1);
  if (d % num_heads != 0) throw DimensionError("channel count not divisible by head count");
  const std::size_t dk = d / num_heads;
  const real inv_sqrt = 1.0 / std::sqrt(static_cast<real>(dk));
  std::vector<Var> heads;
  heads.reserve(num_heads);
  for (std::size_t h = 0; h < num_heads; ++h) {
    Var qh = slice(q, 1, h * dk, dk);
    Var kh = slice(k, 1, h * dk, dk);
    Var vh = slice(v, 1, h * dk, dk);
    Var scores = scale(matmul(qh, transpose(kh), MacKind::AttentionScores), inv_sqrt);
    heads.push_back(matmul(softmax(scores, 1), vh, MacKind::AttentionValues));
  }
  return num_heads == 1 ? heads.front() : concat(heads, 1);
}

// Pre-norm block: x + MHSA(LN(x)), then + MLP(LN(.)).
inline Var attention_block(const Var& x, const AttentionWeights& w, std::size_t num_heads) {
  Var n = w.norm1(x);
  Var attn = multi_head_attention(w.q(n), w.k(n), w.v(n), num_heads);
  Var h = add(x, w.proj(attn));
  Var m = w.fc2(gelu(w.fc1(w.norm2(h))));
  return add(h, m);
}

struct BackboneWeights {
  PatchEmbedWeights embed;
  std::vector<AttentionWeights> blocks;

  static BackboneWeights init(const TrackerConfig& c, std::mt19937_64& rng) {
    BackboneWeights w;
    w.embed = PatchEmbedWeights::init(c, rng);
    for (std::size_t i = 0; i < c.num_layers; ++i) w.blocks.push_back(AttentionWeights::init(c, rng));
    return w;
  }

  void visit(const std::string& prefix, const TensorVisitor& fn) {
    embed.visit(prefix + ".embed", fn);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(prefix + ".blocks." + std::to_string(i), fn);
  }
};

inline Var embed_pair(Tape& tape, const Tensor& template_image, const Tensor& search_image, const BackboneWeights& w,
                      const TrackerConfig& c) {
  Var z = patch_embed(tape, template_image, ImageRole::Template, w.embed, c);
  Var x = patch_embed(tape, search_image, ImageRole::Search, w.embed, c);
  return concat({z, x}, 0);
}

// Embeds both crops, runs every block and returns the outputs of the last num_taps blocks.
inline StateBundle msg_forward(Tape& tape, const Tensor& template_image, const Tensor& search_image,
                               const BackboneWeights& w, const TrackerConfig& c) {
  if (w.blocks.size() != c.num_layers) throw ConfigError("backbone weights do not match num_layers");
  const Grid tg{c.template_grid(), c.template_grid()};
  const Grid sg{c.search_grid(), c.search_grid()};
  Var x = embed_pair(tape, template_image, search_image, w, c);
  StateBundle bundle;
  for (std::size_t i = 0; i < w.blocks.size(); ++i) {
    x = attention_block(x, w.blocks[i], c.num_heads);
    if (i + c.num_taps >= w.blocks.size()) bundle.states.push_back(TokenSequence{x, tg, sg});
  }
  return bundle;
}

}  // namespace mst
