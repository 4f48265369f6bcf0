#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pal/harness/config.hpp"
#include "pal/model/transformer.hpp"

namespace pal::harness {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'P', 'A', 'L', 'C', 'K', 'P', 'T', '1'};

// Layout (little-endian): magic[8], u64 fingerprint, u64 tensor count, then per
// tensor: u32 name length, name bytes, u64 element count, f64 values.
inline void save_checkpoint(model::PalModel& m, std::uint64_t fingerprint, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError(path + ": cannot open for writing");
  auto put = [&](const void* p, std::size_t n) { os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); };
  put(kCheckpointMagic, 8);
  put(&fingerprint, 8);
  std::uint64_t count = 0;
  m.visit([&](const std::string&, Tensor&) { ++count; });
  put(&count, 8);
  m.visit([&](const std::string& name, Tensor& t) {
    const auto len = static_cast<std::uint32_t>(name.size());
    const auto n = static_cast<std::uint64_t>(t.size());
    put(&len, 4);
    put(name.data(), name.size());
    put(&n, 8);
    put(t.data().data(), t.size() * sizeof(double));
  });
  if (!os) throw CheckpointError(path + ": write failed");
}

// Loads into a model built from the matching configuration.
inline void load_checkpoint(model::PalModel& m, std::uint64_t fingerprint, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError(path + ": cannot open");
  auto get = [&](void* p, std::size_t n, const std::string& what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) throw CheckpointError(path + ": truncated while reading " + what);
  };
  char magic[8];
  get(magic, 8, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw CheckpointError(path + ": bad magic, not a PALCKPT1 file");
  std::uint64_t fp = 0, count = 0;
  get(&fp, 8, "fingerprint");
  if (fp != fingerprint) throw CheckpointError(path + ": config fingerprint mismatch");
  get(&count, 8, "tensor count");
  std::vector<std::pair<std::string, Tensor*>> slots;
  m.visit([&](const std::string& name, Tensor& t) { slots.emplace_back(name, &t); });
  if (count != slots.size()) {
    throw CheckpointError(path + ": holds " + std::to_string(count) + " tensors, model has " +
                          std::to_string(slots.size()));
  }
  for (auto& [name, t] : slots) {
    std::uint32_t len = 0;
    get(&len, 4, "name length");
    if (len > 4096) throw CheckpointError(path + ": implausible name length");
    std::string stored(len, '\0');
    get(stored.data(), len, "name");
    if (stored != name) throw CheckpointError(path + ": expected tensor " + name + ", found " + stored);
    std::uint64_t n = 0;
    get(&n, 8, name + " size");
    if (n != t->size()) throw CheckpointError(path + ": size mismatch for " + name);
    std::vector<double> vals(n);
    get(vals.data(), n * sizeof(double), name);
    std::copy(vals.begin(), vals.end(), t->data().begin());
  }
}

}  // namespace pal::harness
