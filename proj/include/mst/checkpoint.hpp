#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "mst/model.hpp"

namespace mst {

class ChecksumError : public InputError {
 public:
  using InputError::InputError;
};

class CheckpointFormatError : public InputError {
 public:
  using InputError::InputError;
};

inline constexpr char kCheckpointMagic[4] = {'M', 'S', 'T', '1'};

namespace ckpt_detail {

inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_bytes(std::vector<std::uint8_t>& b, const std::string& s) {
  put_u32(b, static_cast<std::uint32_t>(s.size()));
  b.insert(b.end(), s.begin(), s.end());
}

inline void put_tensor(std::vector<std::uint8_t>& b, const std::string& name, const Tensor& t) {
  put_bytes(b, name);
  put_u32(b, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_u64(b, d);
  for (std::size_t i = 0; i < t.size(); ++i) put_u32(b, std::bit_cast<std::uint32_t>(static_cast<float>(t[i])));
}

inline std::uint32_t crc(const std::uint8_t* data, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(0L, data, static_cast<uInt>(n)));
}

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t n) : data_(data), n_(n) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }

  std::string bytes() {
    const std::uint32_t len = u32();
    need(len);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), len);
    pos_ += len;
    return s;
  }

  std::pair<std::string, Tensor> tensor() {
    std::string name = bytes();
    const std::uint32_t rank = u32();
    if (rank == 0 || rank > 8) throw CheckpointFormatError("checkpoint tensor '" + name + "' has bad rank");
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape.push_back(u64());
      numel *= shape.back();
      if (shape.back() == 0 || numel > (n_ / 4) + 1) throw CheckpointFormatError("checkpoint tensor '" + name + "' has bad extents");
    }
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(std::bit_cast<float>(u32()));
    return {std::move(name), std::move(t)};
  }

  bool done() const { return pos_ == n_; }

 private:
  void need(std::size_t k) const {
    if (pos_ + k > n_) throw CheckpointFormatError("checkpoint truncated");
  }
  const std::uint8_t* data_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

}  // namespace ckpt_detail

// Layout: magic, config text, parameter tensors, BN buffers, crc32 of everything before it.
// Values are stored as little-endian float32.
inline std::vector<std::uint8_t> serialize_checkpoint(MstModel& m) {
  std::vector<std::uint8_t> b(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  ckpt_detail::put_bytes(b, m.config.to_text());
  std::vector<std::pair<std::string, const Tensor*>> params, buffers;
  m.visit([&](const std::string& n, Tensor& t) { params.emplace_back(n, &t); });
  m.visit_buffers([&](const std::string& n, Tensor& t) { buffers.emplace_back(n, &t); });
  ckpt_detail::put_u32(b, static_cast<std::uint32_t>(params.size()));
  for (const auto& [n, t] : params) ckpt_detail::put_tensor(b, n, *t);
  ckpt_detail::put_u32(b, static_cast<std::uint32_t>(buffers.size()));
  for (const auto& [n, t] : buffers) ckpt_detail::put_tensor(b, n, *t);
  ckpt_detail::put_u32(b, ckpt_detail::crc(b.data(), b.size()));
  return b;
}

inline MstModel deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointFormatError("not an MST1 checkpoint");
  }
  const std::size_t body = bytes.size() - 4;
  ckpt_detail::Reader trailer(bytes.data() + body, 4);
  if (trailer.u32() != ckpt_detail::crc(bytes.data(), body)) throw ChecksumError("checkpoint checksum mismatch");

  ckpt_detail::Reader r(bytes.data() + 4, body - 4);
  MstModel m = MstModel::init(TrackerConfig::parse(r.bytes()), 0);
  std::map<std::string, Tensor*> params, buffers;
  m.visit([&](const std::string& n, Tensor& t) { params[n] = &t; });
  m.visit_buffers([&](const std::string& n, Tensor& t) { buffers[n] = &t; });
  auto load_section = [&](std::map<std::string, Tensor*>& slots, const char* what) {
    const std::uint32_t count = r.u32();
    if (count != slots.size()) {
      throw CheckpointFormatError(std::string("checkpoint ") + what + " count " + std::to_string(count) +
                                  " does not match the model (" + std::to_string(slots.size()) + ")");
    }
    for (std::uint32_t i = 0; i < count; ++i) {
      auto [name, t] = r.tensor();
      auto it = slots.find(name);
      if (it == slots.end()) throw CheckpointFormatError("checkpoint has unknown tensor '" + name + "'");
      if (it->second->shape() != t.shape()) {
        throw CheckpointFormatError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) +
                                    ", model expects " + shape_str(it->second->shape()));
      }
      *it->second = std::move(t);
    }
  };
  load_section(params, "parameter");
  load_section(buffers, "buffer");
  if (!r.done()) throw CheckpointFormatError("trailing bytes in checkpoint");
  return m;
}

inline void save_checkpoint(const std::string& path, MstModel& m) {
  const auto bytes = serialize_checkpoint(m);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw InputError("cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline MstModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace mst
