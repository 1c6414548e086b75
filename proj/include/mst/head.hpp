#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "mst/autodiff.hpp"
#include "mst/box.hpp"
#include "mst/config.hpp"
#include "mst/fusion.hpp"
#include "mst/nn.hpp"

namespace mst {

inline constexpr real kBnEps = 1e-5;
inline constexpr real kBnMomentum = 0.1;

enum class BnMode { Batch, Running };

struct ConvBnReluWeights {
  Tensor conv;  // [out, 9*in]
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;

  static ConvBnReluWeights init(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    return {he_init({out, 9 * in}, 9 * in, rng), Tensor({out}, 1.0), Tensor({out}), Tensor({out}), Tensor({out}, 1.0)};
  }

  void visit(const std::string& prefix, const TensorVisitor& fn) {
    fn(prefix + ".conv", conv);
    fn(prefix + ".bn.gamma", gamma);
    fn(prefix + ".bn.beta", beta);
  }

  void visit_buffers(const std::string& prefix, const TensorVisitor& fn) {
    fn(prefix + ".bn.running_mean", running_mean);
    fn(prefix + ".bn.running_var", running_var);
  }
};

// Conv-BN-ReLU stages followed by a 1x1 conv and sigmoid.
struct BranchWeights {
  std::vector<ConvBnReluWeights> stages;
  Tensor out_w;  // [channels, last]
  Tensor out_b;

  static BranchWeights init(std::size_t in, std::size_t width, std::size_t out_channels, real out_bias,
                            std::mt19937_64& rng) {
    BranchWeights b;
    const std::size_t widths[3] = {width, width / 2, width / 4};
    std::size_t prev = in;
    for (std::size_t w : widths) {
      b.stages.push_back(ConvBnReluWeights::init(prev, w, rng));
      prev = w;
    }
    b.out_w = Tensor::randn({out_channels, prev}, rng, 0.01);
    b.out_b = Tensor({out_channels}, out_bias);
    return b;
  }

  void visit(const std::string& prefix, const TensorVisitor& fn) {
    for (std::size_t i = 0; i < stages.size(); ++i) stages[i].visit(prefix + ".stage" + std::to_string(i), fn);
    fn(prefix + ".out.weight", out_w);
    fn(prefix + ".out.bias", out_b);
  }

  void visit_buffers(const std::string& prefix, const TensorVisitor& fn) {
    for (std::size_t i = 0; i < stages.size(); ++i) stages[i].visit_buffers(prefix + ".stage" + std::to_string(i), fn);
  }
};

struct HeadWeights {
  BranchWeights score;
  BranchWeights size;
  BranchWeights offset;

  static HeadWeights init(const TrackerConfig& c, std::mt19937_64& rng) {
    const real prior = -std::log((1.0 - 0.1) / 0.1);
    HeadWeights w;
    w.score = BranchWeights::init(c.embed_dim, c.head_channels, 1, prior, rng);
    // Sizes start at the nominal target extent in the search crop.
    const real nominal = 1.0 / c.search_factor;
    w.size = BranchWeights::init(c.embed_dim, c.head_channels, 2, std::log(nominal / (1.0 - nominal)), rng);
    w.offset = BranchWeights::init(c.embed_dim, c.head_channels, 2, 0.0, rng);
    return w;
  }

  void visit(const std::string& prefix, const TensorVisitor& fn) {
    score.visit(prefix + ".score", fn);
    size.visit(prefix + ".size", fn);
    offset.visit(prefix + ".offset", fn);
  }

  void visit_buffers(const std::string& prefix, const TensorVisitor& fn) {
    score.visit_buffers(prefix + ".score", fn);
    size.visit_buffers(prefix + ".size", fn);
    offset.visit_buffers(prefix + ".offset", fn);
  }
};

// Head outputs on a tape, token-major over the search grid: score [HW,1], size/offset [HW,2].
struct HeadVars {
  Var score;
  Var size;
  Var offset;
  Grid grid;
};

// Plain-value maps: score [H,W], size [2,H,W], offset [2,H,W].
struct HeadMaps {
  Tensor score;
  Tensor size;
  Tensor offset;

  std::size_t height() const { return score.dim(0); }
  std::size_t width() const { return score.dim(1); }
};

// Conv + BN + ReLU over a batch of samples on one tape. In Batch mode the statistics are
// pooled over every spatial position of every sample.
inline std::vector<Var> conv_bn_relu(const std::vector<Var>& xs, Grid grid, ConvBnReluWeights& w, BnMode mode,
                                     bool update_stats) {
  Tape& t = *xs.front().tape();
  Var kernel = t.param(w.conv);
  std::vector<Var> ys;
  for (const auto& x : xs) ys.push_back(conv2d(x, grid, kernel, Var{}, 3));
  Var gamma = t.param(w.gamma), beta = t.param(w.beta);
  std::vector<Var> out;
  if (mode == BnMode::Batch) {
    Var y = ys.size() == 1 ? ys.front() : concat(ys, 0);
    Var normalized = standardize(y, 0, kBnEps);
    if (update_stats) {
      const Tensor& yv = y.value();
      const std::size_t p = yv.dim(0), c = yv.dim(1);
      for (std::size_t ch = 0; ch < c; ++ch) {
        real mu = 0.0;
        for (std::size_t i = 0; i < p; ++i) mu += yv(i, ch);
        mu /= static_cast<real>(p);
        real var = 0.0;
        for (std::size_t i = 0; i < p; ++i) var += (yv(i, ch) - mu) * (yv(i, ch) - mu);
        var /= static_cast<real>(p > 1 ? p - 1 : 1);
        w.running_mean[ch] = (1.0 - kBnMomentum) * w.running_mean[ch] + kBnMomentum * mu;
        w.running_var[ch] = (1.0 - kBnMomentum) * w.running_var[ch] + kBnMomentum * var;
      }
    }
    Var z = relu(add(mul(normalized, gamma), beta));
    if (ys.size() == 1) return {z};
    return split(z, 0, std::vector<std::size_t>(ys.size(), grid.cells()));
  }
  Tensor inv_std(w.running_var.shape());
  for (std::size_t i = 0; i < inv_std.size(); ++i) inv_std[i] = 1.0 / std::sqrt(w.running_var[i] + kBnEps);
  Var mean = t.constant(w.running_mean), scale = t.constant(inv_std);
  for (const auto& y : ys) out.push_back(relu(add(mul(mul(sub(y, mean), scale), gamma), beta)));
  return out;
}

inline std::vector<Var> branch_forward(const std::vector<Var>& xs, Grid grid, BranchWeights& w, BnMode mode,
                                       bool update_stats) {
  Tape& t = *xs.front().tape();
  std::vector<Var> h = xs;
  for (auto& stage : w.stages) h = conv_bn_relu(h, grid, stage, mode, update_stats);
  Var ow = t.param(w.out_w), ob = t.param(w.out_b);
  for (auto& v : h) v = sigmoid(conv2d(v, grid, ow, ob, 1));
  return h;
}

// Center head on the search-region tokens of each fused state; template tokens are dropped.
// All states share one tape and one search grid. Running BN statistics are updated only
// when update_stats is set (single trainer thread).
inline std::vector<HeadVars> head_forward_batch(const std::vector<FusedState>& fused, HeadWeights& w, BnMode mode,
                                                bool update_stats = false) {
  if (fused.empty()) throw InputError("head: empty batch");
  std::vector<Var> search;
  const Grid g = fused.front().y.search_grid;
  for (const auto& f : fused) {
    const TokenSequence& seq = f.y;
    seq.check();
    if (seq.search_grid != g) throw GeometryError("head: mixed search grids in batch");
    search.push_back(slice(seq.tokens, 0, seq.template_len(), seq.search_len()));
  }
  auto score = branch_forward(search, g, w.score, mode, update_stats);
  auto size = branch_forward(search, g, w.size, mode, update_stats);
  auto offset = branch_forward(search, g, w.offset, mode, update_stats);
  std::vector<HeadVars> out;
  for (std::size_t i = 0; i < fused.size(); ++i) out.push_back(HeadVars{score[i], size[i], offset[i], g});
  return out;
}

inline HeadVars head_forward(const FusedState& fused, HeadWeights& w, BnMode mode, bool update_stats = false) {
  return head_forward_batch({fused}, w, mode, update_stats).front();
}

inline HeadMaps to_maps(const HeadVars& v) {
  const std::size_t h = v.grid.h, w = v.grid.w;
  HeadMaps m{Tensor({h, w}), Tensor({2, h, w}), Tensor({2, h, w})};
  const Tensor& s = v.score.value();
  const Tensor& sz = v.size.value();
  const Tensor& of = v.offset.value();
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t i = r * w + c;
      m.score(r, c) = s[i];
      for (std::size_t k = 0; k < 2; ++k) {
        m.size(k, r, c) = sz[i * 2 + k];
        m.offset(k, r, c) = of[i * 2 + k];
      }
    }
  }
  return m;
}

struct Cell {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

// First maximum in row-major order.
inline Cell argmax_cell(const Tensor& score) {
  Cell best;
  real bv = score(0, 0);
  for (std::size_t r = 0; r < score.dim(0); ++r) {
    for (std::size_t c = 0; c < score.dim(1); ++c) {
      if (score(r, c) > bv) {
        bv = score(r, c);
        best = {r, c};
      }
    }
  }
  return best;
}

// Box in search-crop pixels decoded at a given cell.
inline BoxXYWH decode_at(const HeadMaps& maps, Cell cell, real search_size) {
  const real hp = static_cast<real>(maps.height()), wp = static_cast<real>(maps.width());
  const real cx = (static_cast<real>(cell.col) + maps.offset(0, cell.row, cell.col)) / wp;
  const real cy = (static_cast<real>(cell.row) + maps.offset(1, cell.row, cell.col)) / hp;
  const real bw = maps.size(0, cell.row, cell.col);
  const real bh = maps.size(1, cell.row, cell.col);
  return BoxXYWH::from_center(cx * search_size, cy * search_size, bw * search_size, bh * search_size);
}

inline BoxXYWH decode_box(const HeadMaps& maps, real search_size) {
  return decode_at(maps, argmax_cell(maps.score), search_size);
}

inline std::vector<real> hann(std::size_t n) {
  std::vector<real> w(n, 1.0);
  if (n < 2) return w;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<real>(i) / static_cast<real>(n - 1));
  }
  return w;
}

// P' = (1 - weight) P + weight (P ⊙ outer(hann, hann)).
inline Tensor hanning_rescore(const Tensor& score, real weight) {
  if (weight < 0.0 || weight > 1.0) throw std::invalid_argument("hanning weight must lie in [0, 1]");
  const auto wy = hann(score.dim(0));
  const auto wx = hann(score.dim(1));
  Tensor out(score.shape());
  for (std::size_t r = 0; r < score.dim(0); ++r) {
    for (std::size_t c = 0; c < score.dim(1); ++c) {
      const real p = score(r, c);
      out(r, c) = weight == 0.0 ? p : (1.0 - weight) * p + weight * p * wy[r] * wx[c];
    }
  }
  return out;
}

inline constexpr real kFocalAlpha = 2.0;
inline constexpr real kFocalBeta = 4.0;
inline constexpr real kLogFloor = 1e-12;

// Penalty-reduced focal loss normalized by the number of cells where gt == 1.
inline Var focal_loss(const Var& p, const Tensor& gt) {
  Tape& t = *p.tape();
  if (gt.size() != p.size()) {
    throw DimensionError("focal_loss: prediction " + shape_str(p.shape()) + " vs target " + shape_str(gt.shape()));
  }
  Tensor pos(p.shape()), negw(p.shape());
  real num_pos = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == 1.0) {
      pos[i] = 1.0;
      num_pos += 1.0;
    } else {
      negw[i] = std::pow(1.0 - gt[i], kFocalBeta);
    }
  }
  if (num_pos == 0.0) throw InputError("focal_loss: target heatmap has no positive cell");
  Var one_minus_p = add_scalar(neg(p), 1.0);
  Var pos_term = mul(mul(square(one_minus_p), log(p, kLogFloor)), t.constant(pos));
  Var neg_term = mul(mul(square(p), log(one_minus_p, kLogFloor)), t.constant(negw));
  return scale(sum(add(pos_term, neg_term)), -1.0 / num_pos);
}

inline void require_valid_gt(const BoxXYWH& gt) {
  if (!(gt.w > 0 && gt.h > 0) || !std::isfinite(gt.x) || !std::isfinite(gt.y)) {
    throw InputError("degenerate ground-truth box " + gt.to_line());
  }
}

// 1 - GIoU for plain boxes.
inline real giou_loss(const BoxXYWH& pred, const BoxXYWH& gt) {
  require_valid_gt(gt);
  if (pred.w < 0 || pred.h < 0) throw InputError("giou_loss: negative predicted extent");
  const real iw = std::max(0.0, std::min(pred.x2(), gt.x2()) - std::max(pred.x, gt.x));
  const real ih = std::max(0.0, std::min(pred.y2(), gt.y2()) - std::max(pred.y, gt.y));
  const real inter = iw * ih;
  const real uni = pred.area() + gt.area() - inter;
  const real hull = (std::max(pred.x2(), gt.x2()) - std::min(pred.x, gt.x)) *
                      (std::max(pred.y2(), gt.y2()) - std::min(pred.y, gt.y));
  return 1.0 - (inter / uni - (hull - uni) / hull);
}

// 1 - GIoU for a [1, 4] (x1, y1, x2, y2) prediction on the tape.
inline Var giou_loss(const Var& pred_xyxy, const BoxXYWH& gt) {
  require_valid_gt(gt);
  Tape& t = *pred_xyxy.tape();
  auto col = [&](std::size_t i) { return slice(pred_xyxy, 1, i, 1); };
  auto cst = [&](real v) { return t.constant(Tensor({1, 1}, v)); };
  Var x1 = col(0), y1 = col(1), x2 = col(2), y2 = col(3);
  Var gx1 = cst(gt.x), gy1 = cst(gt.y), gx2 = cst(gt.x2()), gy2 = cst(gt.y2());
  Var iw = relu(sub(minimum(x2, gx2), maximum(x1, gx1)));
  Var ih = relu(sub(minimum(y2, gy2), maximum(y1, gy1)));
  Var inter = mul(iw, ih);
  Var area = mul(sub(x2, x1), sub(y2, y1));
  Var uni = sub(add_scalar(area, gt.area()), inter);
  Var hull = mul(sub(maximum(x2, gx2), minimum(x1, gx1)), sub(maximum(y2, gy2), minimum(y1, gy1)));
  Var giou = sub(div(inter, uni), div(sub(hull, uni), hull));
  return add_scalar(neg(giou), 1.0);
}

// Classification target: Gaussian splat around the cell containing the gt center.
inline Tensor gaussian_heatmap(const BoxXYWH& gt, std::size_t search_size, std::size_t patch_size, Grid grid) {
  const real s = static_cast<real>(search_size);
  const std::size_t col =
      std::min<std::size_t>(grid.w - 1, static_cast<std::size_t>(std::max<real>(0.0, std::floor(gt.cx() / s * grid.w))));
  const std::size_t row =
      std::min<std::size_t>(grid.h - 1, static_cast<std::size_t>(std::max<real>(0.0, std::floor(gt.cy() / s * grid.h))));
  const real sigma = std::max<real>(1.0, 0.1 * std::min(gt.w, gt.h) / static_cast<real>(patch_size));
  Tensor heat({grid.cells(), 1});
  for (std::size_t r = 0; r < grid.h; ++r) {
    for (std::size_t c = 0; c < grid.w; ++c) {
      const real dr = static_cast<real>(r) - static_cast<real>(row);
      const real dc = static_cast<real>(c) - static_cast<real>(col);
      heat[r * grid.w + c] = std::exp(-(dr * dr + dc * dc) / (2.0 * sigma * sigma));
    }
  }
  return heat;
}

inline Cell gt_cell(const BoxXYWH& gt, std::size_t search_size, Grid grid) {
  const real s = static_cast<real>(search_size);
  return {std::min<std::size_t>(grid.h - 1, static_cast<std::size_t>(std::max<real>(0.0, std::floor(gt.cy() / s * grid.h)))),
          std::min<std::size_t>(grid.w - 1, static_cast<std::size_t>(std::max<real>(0.0, std::floor(gt.cx() / s * grid.w))))};
}

struct LossWeights {
  real iou = 2.0;
  real l1 = 5.0;
};

struct LossTerms {
  Var total;
  Var cls;
  Var iou;
  Var l1;
};

// Normalized (x1, y1, x2, y2) prediction read from the size/offset maps at a cell.
inline Var predicted_xyxy_at(const HeadVars& head, Cell cell) {
  const std::size_t idx = cell.row * head.grid.w + cell.col;
  Var off = slice(head.offset, 0, idx, 1);
  Var sz = slice(head.size, 0, idx, 1);
  Var cx = scale(add_scalar(slice(off, 1, 0, 1), static_cast<real>(cell.col)), 1.0 / static_cast<real>(head.grid.w));
  Var cy = scale(add_scalar(slice(off, 1, 1, 1), static_cast<real>(cell.row)), 1.0 / static_cast<real>(head.grid.h));
  Var hw = scale(slice(sz, 1, 0, 1), 0.5);
  Var hh = scale(slice(sz, 1, 1, 1), 0.5);
  return concat({sub(cx, hw), sub(cy, hh), add(cx, hw), add(cy, hh)}, 1);
}

// L = L_cls + w.iou * L_giou + w.l1 * L_1. gt is in search-crop pixels; regression terms
// read the maps at the gt cell, and L_1 is the mean absolute error of normalized x1,y1,x2,y2.
inline LossTerms total_loss(const HeadVars& head, const BoxXYWH& gt, std::size_t search_size, std::size_t patch_size,
                            LossWeights weights = {}) {
  require_valid_gt(gt);
  Tape& t = *head.score.tape();
  const real s = static_cast<real>(search_size);
  const BoxXYWH gt_n = gt.scaled(1.0 / s);
  LossTerms terms;
  terms.cls = focal_loss(head.score, gaussian_heatmap(gt, search_size, patch_size, head.grid));
  Var pred = predicted_xyxy_at(head, gt_cell(gt, search_size, head.grid));
  terms.iou = giou_loss(pred, gt_n);
  Tensor gt_xyxy({1, 4}, std::vector<real>{gt_n.x, gt_n.y, gt_n.x2(), gt_n.y2()});
  terms.l1 = mean(abs(sub(pred, t.constant(gt_xyxy))));
  terms.total = add(add(terms.cls, scale(terms.iou, weights.iou)), scale(terms.l1, weights.l1));
  return terms;
}

}  // namespace mst
