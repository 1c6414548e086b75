#pragma once

#include <charconv>
#include <cstddef>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "mst/tensor.hpp"

namespace mst {

// Architecture and inference hyperparameters.
struct TrackerConfig {
  std::size_t patch_size = 16;
  std::size_t embed_dim = 192;
  std::size_t num_layers = 12;
  std::size_t num_heads = 3;
  double mlp_ratio = 4.0;
  std::size_t template_size = 128;
  std::size_t search_size = 256;
  std::size_t ssd_state_count = 64;
  std::size_t aconv_kernel_count = 2;
  std::size_t routing_reduction = 16;  // routing MLP hidden width = max(4, in / reduction)
  std::size_t head_channels = 240;
  std::size_t num_taps = 3;
  double hanning_weight = 0.49;
  double template_factor = 2.0;
  double search_factor = 4.0;

  std::size_t template_grid() const { return template_size / patch_size; }
  std::size_t search_grid() const { return search_size / patch_size; }
  std::size_t template_tokens() const { return template_grid() * template_grid(); }
  std::size_t search_tokens() const { return search_grid() * search_grid(); }
  std::size_t tokens() const { return template_tokens() + search_tokens(); }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t mlp_hidden() const { return static_cast<std::size_t>(mlp_ratio * static_cast<double>(embed_dim)); }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("invalid config: " + m); };
    if (patch_size == 0 || embed_dim == 0 || num_heads == 0) fail("sizes must be positive");
    if (template_size % patch_size != 0 || search_size % patch_size != 0) {
      fail("template_size and search_size must be divisible by patch_size");
    }
    if (template_size == 0 || search_size == 0) fail("image sizes must be positive");
    if (embed_dim % num_heads != 0) fail("embed_dim must be divisible by num_heads");
    if (num_taps == 0 || num_taps > num_layers) fail("num_taps must lie in [1, num_layers]");
    if (ssd_state_count == 0 || 2 * ssd_state_count > tokens()) fail("ssd_state_count must satisfy 1 <= N_s <= L/2");
    if (aconv_kernel_count == 0) fail("aconv_kernel_count must be >= 1");
    if (routing_reduction == 0) fail("routing_reduction must be >= 1");
    if (head_channels < 4) fail("head_channels must be >= 4");
    if (mlp_ratio <= 0) fail("mlp_ratio must be positive");
    if (hanning_weight < 0 || hanning_weight > 1) fail("hanning_weight must lie in [0, 1]");
  }

  // ViT-Tiny backbone at 128/256 inputs; used for the complexity audit.
  static TrackerConfig vit_tiny() { return TrackerConfig{}; }

  // CPU-trainable configuration for the synthetic harness.
  static TrackerConfig desk() {
    TrackerConfig c;
    c.embed_dim = 64;
    c.num_layers = 4;
    c.num_heads = 2;
    c.ssd_state_count = 8;
    c.aconv_kernel_count = 2;
    c.routing_reduction = 4;
    c.head_channels = 64;
    // 7x7 and 15x15 patch grids: the tracker centers its crop on the target, which then sits
    // mid-cell instead of on a corner shared by four cells.
    c.template_size = 112;
    c.search_size = 240;
    return c;
  }

  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "patch_size=" << patch_size << '\n'
       << "embed_dim=" << embed_dim << '\n'
       << "num_layers=" << num_layers << '\n'
       << "num_heads=" << num_heads << '\n'
       << "mlp_ratio=" << mlp_ratio << '\n'
       << "template_size=" << template_size << '\n'
       << "search_size=" << search_size << '\n'
       << "ssd_state_count=" << ssd_state_count << '\n'
       << "aconv_kernel_count=" << aconv_kernel_count << '\n'
       << "routing_reduction=" << routing_reduction << '\n'
       << "head_channels=" << head_channels << '\n'
       << "num_taps=" << num_taps << '\n'
       << "hanning_weight=" << hanning_weight << '\n'
       << "template_factor=" << template_factor << '\n'
       << "search_factor=" << search_factor << '\n';
    return os.str();
  }

  // Flat key=value text, one per line, '#' starts a comment. An optional
  // `preset = desk | vit_tiny` line selects the base values.
  static TrackerConfig parse(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
      kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    TrackerConfig c;
    if (auto it = kv.find("preset"); it != kv.end()) {
      if (it->second == "desk") {
        c = desk();
      } else if (it->second != "vit_tiny") {
        throw ConfigError("unknown preset '" + it->second + "'");
      }
      kv.erase(it);
    }
    for (const auto& [key, value] : kv) c.set(key, value);
    c.validate();
    return c;
  }

  static TrackerConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  friend bool operator==(const TrackerConfig&, const TrackerConfig&) = default;

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static std::size_t to_size(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("config key '" + key + "': bad integer '" + v + "'");
    return out;
  }

  static double to_double(const std::string& key, const std::string& v) {
    try {
      std::size_t pos = 0;
      double d = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': bad number '" + v + "'");
    }
  }

  void set(const std::string& key, const std::string& v) {
    if (key == "patch_size") patch_size = to_size(key, v);
    else if (key == "embed_dim") embed_dim = to_size(key, v);
    else if (key == "num_layers") num_layers = to_size(key, v);
    else if (key == "num_heads") num_heads = to_size(key, v);
    else if (key == "mlp_ratio") mlp_ratio = to_double(key, v);
    else if (key == "template_size") template_size = to_size(key, v);
    else if (key == "search_size") search_size = to_size(key, v);
    else if (key == "ssd_state_count") ssd_state_count = to_size(key, v);
    else if (key == "aconv_kernel_count") aconv_kernel_count = to_size(key, v);
    else if (key == "routing_reduction") routing_reduction = to_size(key, v);
    else if (key == "head_channels") head_channels = to_size(key, v);
    else if (key == "num_taps") num_taps = to_size(key, v);
    else if (key == "hanning_weight") hanning_weight = to_double(key, v);
    else if (key == "template_factor") template_factor = to_double(key, v);
    else if (key == "search_factor") search_factor = to_double(key, v);
    else throw ConfigError("unknown config key '" + key + "'");
  }
};

}  // namespace mst
