// Binary checkpoint format.
//
//   "SPXP" | u32 version | u32 entry count | entries
//   "META" | u32 length | UTF-8 JSON (configs, progress, history)
//   "ADAM" | u64 step | f64 beta1 | f64 beta2 | f64 eps | u32 count | m entries | v entries
//   "RNG_" | u32 length | engine state text
//
// entry: u16 name length | UTF-8 name | u8 dtype (0 = f32) | u8 ndim | u32 dims[ndim] |
//        raw little-endian payload.
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "spexplus/audio.hpp"
#include "spexplus/layers.hpp"
#include "spexplus/tensor.hpp"

namespace spexplus {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<float> data;
  friend bool operator==(const TensorRecord&, const TensorRecord&) = default;
};

struct OptimizerRecord {
  std::uint64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<TensorRecord> m, v;
  friend bool operator==(const OptimizerRecord&, const OptimizerRecord&) = default;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<TensorRecord> tensors;  // parameters, then buffers
  OptimizerRecord optimizer;
  std::string rng_state;

  const TensorRecord* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
    return a.version == b.version && a.meta == b.meta && a.tensors == b.tensors &&
           a.optimizer == b.optimizer && a.rng_state == b.rng_state;
  }
};

namespace detail {

inline void put_bytes(std::string& s, const void* p, std::size_t n) {
  s.append(static_cast<const char*>(p), n);
}
template <typename U>
void put_le(std::string& s, U v) {
  static_assert(std::is_integral_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) s.push_back(char((std::uint64_t(v) >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& s, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_le(s, bits);
}

inline void put_entry(std::string& s, const TensorRecord& t) {
  if (t.name.size() > 0xffff) throw CheckpointError("tensor name too long: " + t.name);
  put_le(s, std::uint16_t(t.name.size()));
  s += t.name;
  put_le(s, std::uint8_t(0));
  put_le(s, std::uint8_t(t.shape.size()));
  for (auto d : t.shape) put_le(s, std::uint32_t(d));
  for (float f : t.data) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_le(s, bits);
  }
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}

  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw CheckpointError("truncated checkpoint file");
  }
  template <typename U>
  U le() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= std::uint64_t(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return U(v);
  }
  double f64() {
    const auto bits = le<std::uint64_t>();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void tag(const char* expected) {
    if (str(4) != expected) throw CheckpointError(std::string("corrupt checkpoint: expected section ") + expected);
  }
  TensorRecord entry() {
    TensorRecord t;
    t.name = str(le<std::uint16_t>());
    const auto dtype = le<std::uint8_t>();
    if (dtype != 0) throw CheckpointError("unsupported dtype code " + std::to_string(dtype) + " for " + t.name);
    const auto ndim = le<std::uint8_t>();
    std::size_t n = 1;
    for (std::size_t i = 0; i < ndim; ++i) {
      t.shape.push_back(le<std::uint32_t>());
      n *= t.shape.back();
    }
    need(4 * n);
    t.data.resize(n);
    for (auto& f : t.data) {
      const auto bits = le<std::uint32_t>();
      std::memcpy(&f, &bits, 4);
    }
    return t;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  std::string s;
  s += "SPXP";
  detail::put_le(s, c.version);
  detail::put_le(s, std::uint32_t(c.tensors.size()));
  for (const auto& t : c.tensors) detail::put_entry(s, t);
  const std::string meta = c.meta.dump();
  s += "META";
  detail::put_le(s, std::uint32_t(meta.size()));
  s += meta;
  s += "ADAM";
  detail::put_le(s, c.optimizer.step);
  detail::put_f64(s, c.optimizer.beta1);
  detail::put_f64(s, c.optimizer.beta2);
  detail::put_f64(s, c.optimizer.eps);
  if (c.optimizer.m.size() != c.optimizer.v.size())
    throw CheckpointError("optimizer moment lists differ in length");
  detail::put_le(s, std::uint32_t(c.optimizer.m.size()));
  for (const auto& t : c.optimizer.m) detail::put_entry(s, t);
  for (const auto& t : c.optimizer.v) detail::put_entry(s, t);
  s += "RNG_";
  detail::put_le(s, std::uint32_t(c.rng_state.size()));
  s += c.rng_state;
  return s;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  detail::Reader r(bytes);
  if (bytes.size() < 4 || bytes.compare(0, 4, "SPXP") != 0)
    throw CheckpointError("not a checkpoint (bad magic)");
  r.str(4);
  Checkpoint c;
  c.version = r.le<std::uint32_t>();
  if (c.version != kCheckpointVersion)
    throw CheckpointError("checkpoint version " + std::to_string(c.version) + " not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  const auto count = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) c.tensors.push_back(r.entry());
  r.tag("META");
  const std::string meta = r.str(r.le<std::uint32_t>());
  try {
    c.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint metadata: ") + e.what());
  }
  r.tag("ADAM");
  c.optimizer.step = r.le<std::uint64_t>();
  c.optimizer.beta1 = r.f64();
  c.optimizer.beta2 = r.f64();
  c.optimizer.eps = r.f64();
  const auto moments = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < moments; ++i) c.optimizer.m.push_back(r.entry());
  for (std::uint32_t i = 0; i < moments; ++i) c.optimizer.v.push_back(r.entry());
  r.tag("RNG_");
  c.rng_state = r.str(r.le<std::uint32_t>());
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint");
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_file(path, serialize_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

template <typename T>
TensorRecord make_record(const std::string& name, const Tensor<T>& t) {
  TensorRecord r{name, t.shape(), {}};
  r.data.resize(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) r.data[i] = float(t[i]);
  return r;
}

// Parameters then buffers of anything exposing visit().
template <typename T, typename Model>
std::vector<TensorRecord> snapshot_tensors(Model& model) {
  std::vector<TensorRecord> out;
  for (auto role : {TensorRole::kParameter, TensorRole::kBuffer})
    for (const auto& nt : named_tensors<T>(model, role)) out.push_back(make_record(nt.name, *nt.tensor));
  return out;
}

// Copies checkpoint tensors into the model. Fails, listing every offending
// name, if the name sets or shapes differ.
template <typename T, typename Model>
void restore_tensors(Model& model, const std::vector<TensorRecord>& records) {
  std::map<std::string, const TensorRecord*> by_name;
  for (const auto& r : records) by_name[r.name] = &r;
  std::vector<std::string> missing, mismatched;
  std::set<std::string> seen;
  std::vector<std::pair<Tensor<T>*, const TensorRecord*>> plan;
  model.visit("", [&](const std::string& name, Tensor<T>& t, TensorRole) {
    seen.insert(name);
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      missing.push_back(name);
    } else if (it->second->shape != t.shape()) {
      mismatched.push_back(name + " " + shape_str(it->second->shape) + " vs " + shape_str(t.shape()));
    } else {
      plan.emplace_back(&t, it->second);
    }
  });
  std::vector<std::string> unexpected;
  for (const auto& [name, _] : by_name)
    if (!seen.count(name)) unexpected.push_back(name);
  if (!missing.empty() || !unexpected.empty() || !mismatched.empty()) {
    std::string msg = "checkpoint does not match model:";
    auto list = [&](const char* label, const std::vector<std::string>& v) {
      if (v.empty()) return;
      msg += std::string("\n  ") + label + " (" + std::to_string(v.size()) + "):";
      for (const auto& n : v) msg += " " + n;
    };
    list("missing", missing);
    list("unexpected", unexpected);
    list("shape mismatch", mismatched);
    throw CheckpointError(msg);
  }
  for (auto [t, r] : plan)
    for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] = T(r->data[i]);
}

}  // namespace spexplus
