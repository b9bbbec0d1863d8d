#pragma once

#include <cstring>
#include <fstream>
#include <map>

#include "xmodal/tensor.hpp"

namespace xmodal {

// Binary training snapshot. Sections are length-prefixed and the file ends
// with a hash trailer so truncation and bit rot surface as load errors.
// Multi-byte fields are little-endian; doubles are raw IEEE-754 bytes.

struct Checkpoint {
  std::string config_json;  // resolved run configuration echo
  int epoch = 0;
  long step = 0;
  std::string rng_state;  // serialized engine, restored on resume
  std::map<std::string, Tensor> tensors;
  std::map<std::string, Tensor> opt_tensors;
  std::map<std::string, long> opt_scalars;

  static constexpr char kMagic[9] = "XMCHKPT1";

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

namespace detail {

struct ByteSink {
  std::string buf;
  void raw(const void* p, std::size_t n) {
    buf.append(static_cast<const char*>(p), n);
  }
  void u64(std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    raw(b, 8);
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void tensor(const Tensor& t) {
    u64(t.shape().size());
    for (int d : t.shape()) i64(d);
    raw(t.data(), t.numel() * sizeof(real));
  }
};

struct ByteSource {
  const std::string& buf;
  std::size_t pos = 0;
  void raw(void* p, std::size_t n) {
    if (pos + n > buf.size()) throw IoError("checkpoint: truncated section");
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  std::uint64_t u64() {
    char b[8];
    raw(b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i]))
           << (8 * i);
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  std::string str() {
    std::uint64_t n = u64();
    if (pos + n > buf.size()) throw IoError("checkpoint: truncated string");
    std::string s(buf.data() + pos, n);
    pos += n;
    return s;
  }
  Tensor tensor() {
    std::uint64_t nd = u64();
    if (nd > 8) throw IoError("checkpoint: implausible tensor rank");
    std::vector<int> shape(nd);
    for (auto& d : shape) {
      std::int64_t v = i64();
      if (v <= 0 || v > (1 << 24)) throw IoError("checkpoint: bad dimension");
      d = static_cast<int>(v);
    }
    Tensor t(shape);
    raw(t.data(), t.numel() * sizeof(real));
    return t;
  }
};

}  // namespace detail

inline void Checkpoint::save(const std::string& path) const {
  detail::ByteSink s;
  s.raw(kMagic, 8);
  s.str(config_json);
  s.i64(epoch);
  s.i64(step);
  s.str(rng_state);
  auto named = [&s](const std::map<std::string, Tensor>& m) {
    s.u64(m.size());
    for (const auto& [name, t] : m) {
      s.str(name);
      s.tensor(t);
    }
  };
  named(tensors);
  named(opt_tensors);
  s.u64(opt_scalars.size());
  for (const auto& [name, v] : opt_scalars) {
    s.str(name);
    s.i64(v);
  }
  s.u64(fnv1a64(s.buf.data(), s.buf.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("checkpoint: cannot open for write: " + path);
  out.write(s.buf.data(), static_cast<std::streamsize>(s.buf.size()));
  if (!out) throw IoError("checkpoint: write failed: " + path);
}

inline Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  if (buf.size() < 16 || std::memcmp(buf.data(), kMagic, 8) != 0)
    throw IoError("checkpoint: bad magic: " + path);
  const std::size_t body = buf.size() - 8;
  detail::ByteSource tail{buf, body};
  if (tail.u64() != fnv1a64(buf.data(), body))
    throw IoError("checkpoint: hash mismatch (corrupt or truncated)");

  detail::ByteSource s{buf, 8};
  Checkpoint c;
  c.config_json = s.str();
  c.epoch = static_cast<int>(s.i64());
  c.step = s.i64();
  c.rng_state = s.str();
  auto named = [&s, body](std::map<std::string, Tensor>& m) {
    std::uint64_t n = s.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
      if (s.pos >= body) throw IoError("checkpoint: truncated table");
      std::string name = s.str();
      m.emplace(std::move(name), s.tensor());
    }
  };
  named(c.tensors);
  named(c.opt_tensors);
  std::uint64_t ns = s.u64();
  for (std::uint64_t i = 0; i < ns; ++i) {
    std::string name = s.str();
    c.opt_scalars.emplace(std::move(name), s.i64());
  }
  if (s.pos != body) throw IoError("checkpoint: trailing bytes");
  return c;
}

}  // namespace xmodal
