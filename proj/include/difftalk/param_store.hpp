#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "difftalk/tensor.hpp"

namespace difftalk {

/// Named parameter registry. Paths are dot-separated ("completion.lf.query") and unique.
/// Models keep Tensor handles to the registered entries, so in-place updates made here
/// (optimizer steps, checkpoint loads) are visible to them.
class ParamStore {
 public:
  struct Entry {
    Tensor tensor;
    bool trainable = true;
  };

  /// Registers a parameter. Trainable entries participate in the gradient tape.
  Tensor add(const std::string& path, Tensor init, bool trainable = true);

  bool contains(const std::string& path) const { return entries_.count(path) != 0; }
  const Tensor& get(const std::string& path) const;
  bool trainable(const std::string& path) const;

  /// Flips the trainable flag (and tape participation) of every entry under `prefix`.
  void set_trainable(std::string_view prefix, bool trainable);

  void zero_grad();
  std::size_t parameter_count(std::string_view prefix = {}) const;
  std::vector<std::string> paths(std::string_view prefix = {}) const;
  const std::map<std::string, Entry>& entries() const { return entries_; }

  /// FNV-1a over paths, shapes and the raw bytes of every value under `prefix`.
  std::uint64_t checksum(std::string_view prefix = {}) const;

 private:
  std::map<std::string, Entry> entries_;
};

bool has_prefix(std::string_view path, std::string_view prefix);

// Checkpoint container: "DTCKPT\0\0", uint32 version, uint64 count, then per entry
// uint32 path length, path bytes, uint8 trainable, uint32 rank, uint64 dims, raw doubles.
// All integers little-endian. Values are stored bit-exact.
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const ParamStore& store, const std::filesystem::path& file,
                     std::string_view prefix = {});
/// Reads a checkpoint into a fresh store (all entries as stored).
ParamStore read_checkpoint(const std::filesystem::path& file);
/// Overwrites the values of existing entries under `prefix`. Every such entry must be
/// present in the file with an identical shape.
void load_checkpoint(ParamStore& store, const std::filesystem::path& file,
                     std::string_view prefix = {});

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Only trainable entries are touched.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  /// Updates trainable entries under `prefix` (all when empty).
  void step(ParamStore& store, std::string_view prefix = {});
  std::int64_t steps() const { return steps_; }
  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamConfig config_;
  std::int64_t steps_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace difftalk
