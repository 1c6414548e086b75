#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace mst {

enum class Component : std::uint8_t { Backbone = 0, Sse, Csi, Head, Count };

inline constexpr std::size_t kNumComponents = static_cast<std::size_t>(Component::Count);

inline std::string_view component_name(Component c) {
  switch (c) {
    case Component::Backbone: return "backbone";
    case Component::Sse: return "sse";
    case Component::Csi: return "csi";
    case Component::Head: return "head";
    default: return "?";
  }
}

// What produced a multiply-accumulate. Weighted kinds are products against learned
// weights (what layer profilers report); the rest multiply two activations.
enum class MacKind : std::uint8_t {
  Linear = 0,
  Conv,
  DepthwiseConv,
  AttentionScores,
  AttentionValues,
  StateContraction,
  Count
};

inline constexpr std::size_t kNumMacKinds = static_cast<std::size_t>(MacKind::Count);

inline constexpr bool is_weighted(MacKind k) {
  return k == MacKind::Linear || k == MacKind::Conv || k == MacKind::DepthwiseConv;
}

// Per-component MAC and parameter tallies. Not thread-safe: one counter per audit pass.
class OpCounter {
 public:
  void add_macs(Component c, MacKind k, std::uint64_t n) { macs_[idx(c)][static_cast<std::size_t>(k)] += n; }
  void add_params(Component c, std::uint64_t n) { params_[idx(c)] += n; }

  std::uint64_t macs(Component c, MacKind k) const { return macs_[idx(c)][static_cast<std::size_t>(k)]; }

  std::uint64_t macs(Component c) const {
    std::uint64_t s = 0;
    for (auto v : macs_[idx(c)]) s += v;
    return s;
  }

  std::uint64_t weighted_macs(Component c) const {
    std::uint64_t s = 0;
    for (std::size_t k = 0; k < kNumMacKinds; ++k) {
      if (is_weighted(static_cast<MacKind>(k))) s += macs_[idx(c)][k];
    }
    return s;
  }

  std::uint64_t macs_of_kind(MacKind k) const {
    std::uint64_t s = 0;
    for (std::size_t c = 0; c < kNumComponents; ++c) s += macs_[c][static_cast<std::size_t>(k)];
    return s;
  }

  std::uint64_t params(Component c) const { return params_[idx(c)]; }

  std::uint64_t total_macs() const {
    std::uint64_t s = 0;
    for (std::size_t c = 0; c < kNumComponents; ++c) s += macs(static_cast<Component>(c));
    return s;
  }

  std::uint64_t total_weighted_macs() const {
    std::uint64_t s = 0;
    for (std::size_t c = 0; c < kNumComponents; ++c) s += weighted_macs(static_cast<Component>(c));
    return s;
  }

  std::uint64_t total_params() const {
    std::uint64_t s = 0;
    for (auto v : params_) s += v;
    return s;
  }

  void reset() { *this = OpCounter{}; }

 private:
  static std::size_t idx(Component c) { return static_cast<std::size_t>(c); }

  std::array<std::array<std::uint64_t, kNumMacKinds>, kNumComponents> macs_{};
  std::array<std::uint64_t, kNumComponents> params_{};
};

}  // namespace mst
