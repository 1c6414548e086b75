#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mst/backbone.hpp"
#include "mst/config.hpp"
#include "mst/fusion.hpp"
#include "mst/head.hpp"

namespace mst {

struct ForwardResult {
  StateBundle taps;
  StateBundle enhanced;
  FusedState fused;
  HeadVars head;
};

// Backbone -> SSE -> CSI -> center head.
struct MstModel {
  TrackerConfig config;
  BackboneWeights backbone;
  SseWeights sse;
  CsiWeights csi;
  HeadWeights head;

  static MstModel init(const TrackerConfig& c, std::uint64_t seed) {
    c.validate();
    std::mt19937_64 rng(seed);
    MstModel m;
    m.config = c;
    m.backbone = BackboneWeights::init(c, rng);
    m.sse = SseWeights::init(c, rng);
    m.csi = CsiWeights::init(c, rng);
    m.head = HeadWeights::init(c, rng);
    return m;
  }

  void visit_component(Component c, const TensorVisitor& fn) {
    switch (c) {
      case Component::Backbone: backbone.visit("backbone", fn); break;
      case Component::Sse: sse.visit("sse", fn); break;
      case Component::Csi: csi.visit("csi", fn); break;
      case Component::Head: head.visit("head", fn); break;
      default: break;
    }
  }

  // Trainable tensors in a fixed order.
  void visit(const TensorVisitor& fn) {
    for (std::size_t i = 0; i < kNumComponents; ++i) visit_component(static_cast<Component>(i), fn);
  }

  // Non-trainable state (BN running statistics).
  void visit_buffers(const TensorVisitor& fn) { head.visit_buffers("head", fn); }

  // Forward for several (template, search) pairs on one tape; Batch-mode BN pools over all of them.
  std::vector<ForwardResult> forward_batch(Tape& tape, const std::vector<const Tensor*>& templates,
                                           const std::vector<const Tensor*>& searches, BnMode mode,
                                           bool update_stats = false) {
    if (templates.size() != searches.size() || templates.empty()) throw InputError("forward: bad batch");
    std::vector<ForwardResult> rs(templates.size());
    std::vector<FusedState> fused;
    for (std::size_t i = 0; i < rs.size(); ++i) {
      ForwardResult& r = rs[i];
      {
        ComponentScope scope(tape, Component::Backbone);
        r.taps = msg_forward(tape, *templates[i], *searches[i], backbone, config);
      }
      {
        ComponentScope scope(tape, Component::Sse);
        r.enhanced = mst::sse(r.taps, sse);
      }
      {
        ComponentScope scope(tape, Component::Csi);
        r.fused = mst::csi(r.enhanced, csi);
      }
      fused.push_back(r.fused);
    }
    ComponentScope scope(tape, Component::Head);
    auto heads = head_forward_batch(fused, head, mode, update_stats);
    for (std::size_t i = 0; i < rs.size(); ++i) rs[i].head = heads[i];
    return rs;
  }

  ForwardResult forward(Tape& tape, const Tensor& template_image, const Tensor& search_image, BnMode mode,
                        bool update_stats = false) {
    return forward_batch(tape, {&template_image}, {&search_image}, mode, update_stats).front();
  }
};

}  // namespace mst
