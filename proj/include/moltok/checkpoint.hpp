// Checkpoint directories: manifest.json describing named tensor shapes and
// byte offsets, plus weights.bin holding little-endian 32-bit floats.
// Manifests carry the stage name, the config hash, and the hashes of the
// frozen upstream stages so dimension drift is caught at load time.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "moltok/ndtensor.hpp"

namespace moltok::pipeline {

struct TensorEntry {
  std::string name;
  std::vector<int> shape;
  std::vector<float> values;
};

struct Manifest {
  int format_version = 1;
  std::string stage;
  uint64_t config_hash = 0;
  std::map<std::string, uint64_t> upstream_hashes;
  std::map<std::string, std::string> upstream_dirs;
  std::map<std::string, std::string> extra;  // e.g. vocab json path
};

uint64_t fnv1a_hash(const std::string& s);

void save_checkpoint(const std::string& dir, const Manifest& manifest,
                     const std::vector<TensorEntry>& entries);

bool checkpoint_exists(const std::string& dir);
Manifest read_manifest(const std::string& dir);
std::vector<TensorEntry> load_checkpoint(const std::string& dir);

// ---------------------------------------------------------------------------
// ParamMap glue
// ---------------------------------------------------------------------------

template <class T>
std::vector<TensorEntry> entries_from(const ndt::ParamMap<T>& pm) {
  std::vector<TensorEntry> out;
  for (const auto& [name, t] : pm.items) {
    TensorEntry e;
    e.name = name;
    e.shape = t.shape();
    e.values.reserve(t.numel());
    for (int64_t i = 0; i < t.numel(); ++i) {
      e.values.push_back(static_cast<float>(t.data()[i]));
    }
    out.push_back(std::move(e));
  }
  return out;
}

template <class T>
void restore_into(ndt::ParamMap<T>& pm, const std::vector<TensorEntry>& entries) {
  for (auto& [name, t] : pm.items) {
    const TensorEntry* found = nullptr;
    for (const auto& e : entries) {
      if (e.name == name) {
        found = &e;
        break;
      }
    }
    if (!found) throw std::runtime_error("checkpoint is missing tensor: " + name);
    if (found->shape != t.shape()) {
      throw std::runtime_error("checkpoint shape mismatch for " + name + ": stored " +
                               ndt::shape_str(found->shape) + ", expected " +
                               ndt::shape_str(t.shape()));
    }
    for (int64_t i = 0; i < t.numel(); ++i) {
      t.data()[i] = static_cast<T>(found->values[i]);
    }
  }
}

}  // namespace moltok::pipeline
