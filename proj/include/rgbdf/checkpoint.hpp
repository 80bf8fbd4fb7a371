#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rgbdf/config.hpp"
#include "rgbdf/optim.hpp"

namespace rgbdf {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

/// Training state at a step boundary. Every random draw in training is derived
/// from (seed, global sample index), so `seed` and `step` are the full RNG state.
struct Checkpoint {
  std::string config_text;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  long step = 0;
  std::vector<NamedTensor> params, adam_m, adam_v;

  RunConfig config() const { return load_run_config_text(config_text); }
};

namespace detail {

inline constexpr char kCkptMagic[8] = {'R', 'G', 'B', 'D', 'F', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCkptVersion = 1;

class BinWriter {
 public:
  explicit BinWriter(std::ostream& os) : os_(os) {}
  template <class U>
  void pod(U v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void bytes(const std::string& s) {
    pod<std::uint64_t>(s.size());
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void tensors(const std::vector<NamedTensor>& ts) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(ts.size()));
    for (const auto& t : ts) {
      bytes(t.name);
      pod<std::uint32_t>(static_cast<std::uint32_t>(t.value.rank()));
      for (Index d : t.value.shape()) pod<std::int64_t>(d);
      os_.write(reinterpret_cast<const char*>(t.value.data()), static_cast<std::streamsize>(t.value.size() * sizeof(float)));
    }
  }

 private:
  std::ostream& os_;
};

class BinReader {
 public:
  explicit BinReader(std::istream& is) : is_(is) {}
  void raw(void* dst, std::size_t n, const char* what) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw FormatError(std::string("checkpoint truncated in ") + what, off_);
    off_ += n;
  }
  template <class U>
  U pod(const char* what) {
    U v;
    raw(&v, sizeof v, what);
    return v;
  }
  std::string bytes(const char* what, std::uint64_t limit) {
    const auto at = off_;
    const auto n = pod<std::uint64_t>(what);
    if (n > limit) throw FormatError(std::string("implausible length for ") + what, at);
    std::string s(n, '\0');
    raw(s.data(), n, what);
    return s;
  }
  std::vector<NamedTensor> tensors() {
    const auto n = pod<std::uint32_t>("tensor count");
    std::vector<NamedTensor> out;
    for (std::uint32_t i = 0; i < n; ++i) {
      NamedTensor t;
      t.name = bytes("tensor name", 1 << 12);
      const auto at = off_;
      const auto rank = pod<std::uint32_t>("tensor rank");
      if (rank > 8) throw FormatError("tensor rank " + std::to_string(rank) + " too large", at);
      Shape shape(rank);
      for (auto& d : shape) {
        d = pod<std::int64_t>("tensor dims");
        if (d < 0 || d > (Index{1} << 32)) throw FormatError("bad dimension for " + t.name, off_ - 8);
      }
      t.value = Tensor<float>(shape);
      raw(t.value.data(), static_cast<std::size_t>(t.value.size()) * sizeof(float), "tensor data");
      out.push_back(std::move(t));
    }
    return out;
  }
  std::uint64_t offset() const { return off_; }

 private:
  std::istream& is_;
  std::uint64_t off_ = 0;
};

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& c) {
  detail::BinWriter w(os);
  os.write(detail::kCkptMagic, sizeof detail::kCkptMagic);
  w.pod(detail::kCkptVersion);
  w.bytes(c.config_text);
  w.pod(c.config_hash);
  w.pod(c.seed);
  w.pod<std::int64_t>(c.step);
  w.tensors(c.params);
  w.tensors(c.adam_m);
  w.tensors(c.adam_v);
}

/// Writes to `path.tmp` and renames, so a crash never leaves a partial file.
inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp.string());
    write_checkpoint(f, c);
    f.flush();
    if (!f) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(std::istream& is) {
  detail::BinReader r(is);
  char magic[8];
  r.raw(magic, sizeof magic, "magic");
  if (std::memcmp(magic, detail::kCkptMagic, sizeof magic) != 0) throw FormatError("not a checkpoint (bad magic)", 0);
  if (const auto v = r.pod<std::uint32_t>("version"); v != detail::kCkptVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(v), 8);
  Checkpoint c;
  c.config_text = r.bytes("config text", 1 << 20);
  const auto hash_at = r.offset();
  c.config_hash = r.pod<std::uint64_t>("config hash");
  c.seed = r.pod<std::uint64_t>("seed");
  c.step = static_cast<long>(r.pod<std::int64_t>("step"));
  if (c.step < 0) throw FormatError("negative step", r.offset() - 8);
  c.params = r.tensors();
  c.adam_m = r.tensors();
  c.adam_v = r.tensors();
  if (config_hash(load_run_config_text(c.config_text)) != c.config_hash)
    throw IntegrityError("checkpoint config hash does not match its config text (offset " + std::to_string(hash_at) + ")");
  return c;
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  return read_checkpoint(f);
}

template <class T>
std::vector<NamedTensor> snapshot_params(const Network<T>& net) {
  std::vector<NamedTensor> out;
  for (const auto& e : net.params().entries()) {
    Tensor<float> t(e.shape);
    const auto& v = e.var.value();
    for (Index i = 0; i < v.size(); ++i) t[i] = static_cast<float>(v[i]);
    out.push_back({e.name, std::move(t)});
  }
  return out;
}

/// Copies stored tensors into materialized `dst`, matching by position and checking name and shape.
template <class T>
void restore_tensors(const std::vector<NamedTensor>& src, const std::vector<std::string>& names,
                     std::vector<Tensor<T>*> dst) {
  if (src.size() != dst.size()) throw IntegrityError("checkpoint holds " + std::to_string(src.size()) + " tensors, model has " + std::to_string(dst.size()));
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].name != names[i]) throw IntegrityError("checkpoint tensor '" + src[i].name + "' where '" + names[i] + "' expected");
    if (src[i].value.shape() != dst[i]->shape())
      throw IntegrityError("shape mismatch for " + names[i] + ": " + shape_str(src[i].value.shape()) + " vs " + shape_str(dst[i]->shape()));
    for (Index k = 0; k < dst[i]->size(); ++k) (*dst[i])[k] = static_cast<T>(src[i].value[k]);
  }
}

template <class T>
void load_params(Network<T>& net, const std::vector<NamedTensor>& src) {
  if (!net.params().materialized()) net.materialize(0);
  std::vector<std::string> names;
  std::vector<Tensor<T>*> dst;
  for (auto& e : net.params().entries()) {
    names.push_back(e.name);
    dst.push_back(&e.var.value());
  }
  restore_tensors(src, names, dst);
}

/// Network with weights from a checkpoint (config taken from the checkpoint).
inline Network<float> load_model(const Checkpoint& c) {
  Network<float> net(c.config().model);
  load_params(net, c.params);
  return net;
}

}  // namespace rgbdf
