#include "difftalk/param_store.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace difftalk {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

bool has_prefix(std::string_view path, std::string_view prefix) {
  if (prefix.empty()) return true;
  if (path.substr(0, prefix.size()) != prefix) return false;
  return path.size() == prefix.size() || prefix.back() == '.' || path[prefix.size()] == '.';
}

Tensor ParamStore::add(const std::string& path, Tensor init, bool trainable) {
  if (path.empty()) throw std::invalid_argument("empty parameter path");
  if (contains(path)) throw std::invalid_argument("duplicate parameter path: " + path);
  init.set_requires_grad(trainable);
  entries_.emplace(path, Entry{init, trainable});
  return init;
}

const Tensor& ParamStore::get(const std::string& path) const {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter path: " + path);
  return it->second.tensor;
}

bool ParamStore::trainable(const std::string& path) const {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter path: " + path);
  return it->second.trainable;
}

void ParamStore::set_trainable(std::string_view prefix, bool trainable) {
  for (auto& [path, entry] : entries_) {
    if (!has_prefix(path, prefix)) continue;
    entry.trainable = trainable;
    entry.tensor.set_requires_grad(trainable);
  }
}

void ParamStore::zero_grad() {
  for (auto& [path, entry] : entries_) entry.tensor.zero_grad();
}

std::size_t ParamStore::parameter_count(std::string_view prefix) const {
  std::size_t n = 0;
  for (const auto& [path, entry] : entries_) {
    if (has_prefix(path, prefix)) n += entry.tensor.numel();
  }
  return n;
}

std::vector<std::string> ParamStore::paths(std::string_view prefix) const {
  std::vector<std::string> out;
  for (const auto& [path, entry] : entries_) {
    if (has_prefix(path, prefix)) out.push_back(path);
  }
  return out;
}

std::uint64_t ParamStore::checksum(std::string_view prefix) const {
  std::uint64_t h = 1469598103934665603ull;
  const auto mix = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [path, entry] : entries_) {
    if (!has_prefix(path, prefix)) continue;
    mix(path.data(), path.size());
    for (auto d : entry.tensor.shape()) mix(&d, sizeof d);
    const auto values = entry.tensor.data();
    mix(values.data(), values.size_bytes());
  }
  return h;
}

namespace {

constexpr char kMagic[8] = {'D', 'T', 'C', 'K', 'P', 'T', '\0', '\0'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T take(std::istream& is, const std::filesystem::path& file) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw CheckpointError("truncated checkpoint: " + file.string());
  }
  return v;
}

}  // namespace

void save_checkpoint(const ParamStore& store, const std::filesystem::path& file,
                     std::string_view prefix) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot write checkpoint: " + file.string());
  const auto paths = store.paths(prefix);
  os.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint64_t>(os, paths.size());
  for (const auto& path : paths) {
    const auto& entry = store.entries().at(path);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(path.size()));
    os.write(path.data(), static_cast<std::streamsize>(path.size()));
    put<std::uint8_t>(os, entry.trainable ? 1 : 0);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(entry.tensor.ndim()));
    for (auto d : entry.tensor.shape()) put<std::uint64_t>(os, d);
    const auto values = entry.tensor.data();
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size_bytes()));
  }
  if (!os) throw CheckpointError("write failed: " + file.string());
}

ParamStore read_checkpoint(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint: " + file.string());
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw CheckpointError("not a checkpoint file: " + file.string());
  }
  const auto version = take<std::uint32_t>(is, file);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " in " +
                          file.string());
  }
  const auto count = take<std::uint64_t>(is, file);
  ParamStore store;
  for (std::uint64_t e = 0; e < count; ++e) {
    const auto len = take<std::uint32_t>(is, file);
    std::string path(len, '\0');
    if (!is.read(path.data(), len)) throw CheckpointError("truncated checkpoint: " + file.string());
    const bool trainable = take<std::uint8_t>(is, file) != 0;
    const auto rank = take<std::uint32_t>(is, file);
    Shape shape(rank);
    for (auto& d : shape) d = take<std::uint64_t>(is, file);
    std::vector<double> values(numel(shape));
    if (!is.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(values.size() * sizeof(double)))) {
      throw CheckpointError("truncated checkpoint: " + file.string());
    }
    store.add(path, Tensor::from_data(std::move(shape), std::move(values)), trainable);
  }
  return store;
}

void load_checkpoint(ParamStore& store, const std::filesystem::path& file,
                     std::string_view prefix) {
  const ParamStore loaded = read_checkpoint(file);
  for (const auto& path : store.paths(prefix)) {
    if (!loaded.contains(path)) {
      throw CheckpointError("checkpoint " + file.string() + " lacks parameter " + path);
    }
    const Tensor& src = loaded.get(path);
    Tensor dst = store.get(path);
    if (src.shape() != dst.shape()) {
      throw CheckpointError("shape mismatch for " + path + ": checkpoint " +
                            shape_str(src.shape()) + ", model " + shape_str(dst.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }
}

void Adam::step(ParamStore& store, std::string_view prefix) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (const auto& [path, entry] : store.entries()) {
    if (!entry.trainable || !has_prefix(path, prefix)) continue;
    Tensor t = entry.tensor;
    if (!t.has_grad()) throw std::logic_error("adam: trainable parameter without gradient: " + path);
    auto& mom = moments_[path];
    if (mom.m.empty()) {
      mom.m.assign(t.numel(), 0.0);
      mom.v.assign(t.numel(), 0.0);
    }
    auto values = t.mutable_data();
    const auto grad = t.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad[i];
      mom.m[i] = config_.beta1 * mom.m[i] + (1.0 - config_.beta1) * g;
      mom.v[i] = config_.beta2 * mom.v[i] + (1.0 - config_.beta2) * g * g;
      const double mhat = mom.m[i] / bc1;
      const double vhat = mom.v[i] / bc2;
      values[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

}  // namespace difftalk
