#pragma once

#include <random>
#include <string>
#include <vector>

#include "mst/backbone.hpp"
#include "mst/config.hpp"
#include "mst/hsa_ssd.hpp"

namespace mst {

// One independent HSA-SSD block per tapped state.
struct SseWeights {
  std::vector<HsaSsdWeights> blocks;

  static SseWeights init(const TrackerConfig& c, std::mt19937_64& rng) {
    SseWeights w;
    for (std::size_t i = 0; i < c.num_taps; ++i) {
      w.blocks.push_back(
          HsaSsdWeights::init(c.embed_dim, c.ssd_state_count, c.aconv_kernel_count, c.routing_reduction, rng));
    }
    return w;
  }

  void visit(const std::string& prefix, const TensorVisitor& fn) {
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(prefix + "." + std::to_string(i), fn);
  }
};

struct CsiWeights {
  HsaSsdWeights block;

  static CsiWeights init(const TrackerConfig& c, std::mt19937_64& rng) {
    return {HsaSsdWeights::init(c.embed_dim, c.ssd_state_count, c.aconv_kernel_count, c.routing_reduction, rng)};
  }

  void visit(const std::string& prefix, const TensorVisitor& fn) { block.visit(prefix, fn); }
};

struct FusedState {
  TokenSequence y;
};

inline void check_bundle(const StateBundle& b) {
  if (b.states.empty()) throw GeometryError("empty state bundle");
  for (const auto& s : b.states) {
    s.check();
    if (s.tokens.shape() != b.states.front().tokens.shape() || s.template_grid != b.states.front().template_grid ||
        s.search_grid != b.states.front().search_grid) {
      throw GeometryError("state bundle members disagree on shape or grid geometry");
    }
  }
}

inline StateBundle sse(const StateBundle& states, const SseWeights& w) {
  check_bundle(states);
  if (w.blocks.size() != states.states.size()) {
    throw ConfigError("SSE has " + std::to_string(w.blocks.size()) + " blocks for " +
                      std::to_string(states.states.size()) + " states");
  }
  StateBundle out;
  for (std::size_t i = 0; i < states.states.size(); ++i) {
    const auto& s = states.states[i];
    out.states.push_back(TokenSequence{hsa_ssd_block(s.tokens, s.grids(), w.blocks[i]), s.template_grid, s.search_grid});
  }
  return out;
}

// Token-axis concatenation, one joint HSA-SSD block, split in concatenation order, sum.
inline FusedState csi(const StateBundle& states, const CsiWeights& w) {
  check_bundle(states);
  const auto& first = states.states.front();
  std::vector<Var> parts;
  std::vector<Grid> grids;
  std::vector<std::size_t> extents;
  for (const auto& s : states.states) {
    parts.push_back(s.tokens);
    for (const auto& g : s.grids()) grids.push_back(g);
    extents.push_back(s.length());
  }
  Var joint = hsa_ssd_block(concat(parts, 0), grids, w.block);
  auto pieces = split(joint, 0, extents);
  Var y = pieces.front();
  for (std::size_t i = 1; i < pieces.size(); ++i) y = add(y, pieces[i]);
  return FusedState{TokenSequence{y, first.template_grid, first.search_grid}};
}

}  // namespace mst
