#include "moltok/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace moltok::pipeline {

namespace fs = std::filesystem;

uint64_t fnv1a_hash(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

void write_le_f32(std::ofstream& out, const std::vector<float>& v) {
  static_assert(sizeof(float) == 4);
  for (float x : v) {
    uint32_t bits;
    std::memcpy(&bits, &x, 4);
    const unsigned char bytes[4] = {
        static_cast<unsigned char>(bits & 0xff),
        static_cast<unsigned char>((bits >> 8) & 0xff),
        static_cast<unsigned char>((bits >> 16) & 0xff),
        static_cast<unsigned char>((bits >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(bytes), 4);
  }
}

std::vector<float> read_le_f32(std::ifstream& in, size_t count) {
  std::vector<float> v(count);
  for (size_t i = 0; i < count; ++i) {
    unsigned char bytes[4];
    in.read(reinterpret_cast<char*>(bytes), 4);
    const uint32_t bits = static_cast<uint32_t>(bytes[0]) |
                          (static_cast<uint32_t>(bytes[1]) << 8) |
                          (static_cast<uint32_t>(bytes[2]) << 16) |
                          (static_cast<uint32_t>(bytes[3]) << 24);
    std::memcpy(&v[i], &bits, 4);
  }
  return v;
}

}  // namespace

void save_checkpoint(const std::string& dir, const Manifest& manifest,
                     const std::vector<TensorEntry>& entries) {
  fs::create_directories(dir);
  nlohmann::json j;
  j["format_version"] = manifest.format_version;
  j["stage"] = manifest.stage;
  j["config_hash"] = manifest.config_hash;
  j["upstream_hashes"] = manifest.upstream_hashes;
  j["upstream_dirs"] = manifest.upstream_dirs;
  j["extra"] = manifest.extra;

  nlohmann::json tensors = nlohmann::json::array();
  int64_t offset = 0;
  for (const auto& e : entries) {
    nlohmann::json t;
    t["name"] = e.name;
    t["shape"] = e.shape;
    t["offset"] = offset;
    t["count"] = e.values.size();
    tensors.push_back(t);
    offset += static_cast<int64_t>(e.values.size()) * 4;
  }
  j["tensors"] = tensors;

  std::ofstream mout(fs::path(dir) / "manifest.json", std::ios::binary);
  if (!mout) throw std::runtime_error("cannot write manifest in " + dir);
  mout << j.dump(2) << "\n";

  std::ofstream wout(fs::path(dir) / "weights.bin", std::ios::binary);
  if (!wout) throw std::runtime_error("cannot write weights in " + dir);
  for (const auto& e : entries) write_le_f32(wout, e.values);
}

bool checkpoint_exists(const std::string& dir) {
  return fs::exists(fs::path(dir) / "manifest.json") &&
         fs::exists(fs::path(dir) / "weights.bin");
}

Manifest read_manifest(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw std::runtime_error("missing checkpoint manifest in " + dir);
  nlohmann::json j;
  in >> j;
  Manifest m;
  m.format_version = j.at("format_version").get<int>();
  m.stage = j.at("stage").get<std::string>();
  m.config_hash = j.at("config_hash").get<uint64_t>();
  if (j.contains("upstream_hashes")) {
    m.upstream_hashes = j.at("upstream_hashes").get<std::map<std::string, uint64_t>>();
  }
  if (j.contains("upstream_dirs")) {
    m.upstream_dirs = j.at("upstream_dirs").get<std::map<std::string, std::string>>();
  }
  if (j.contains("extra")) {
    m.extra = j.at("extra").get<std::map<std::string, std::string>>();
  }
  return m;
}

std::vector<TensorEntry> load_checkpoint(const std::string& dir) {
  std::ifstream min(fs::path(dir) / "manifest.json");
  if (!min) throw std::runtime_error("missing checkpoint manifest in " + dir);
  nlohmann::json j;
  min >> j;

  std::ifstream win(fs::path(dir) / "weights.bin", std::ios::binary);
  if (!win) throw std::runtime_error("missing checkpoint weights in " + dir);

  std::vector<TensorEntry> entries;
  for (const auto& t : j.at("tensors")) {
    TensorEntry e;
    e.name = t.at("name").get<std::string>();
    e.shape = t.at("shape").get<std::vector<int>>();
    const size_t count = t.at("count").get<size_t>();
    win.seekg(t.at("offset").get<int64_t>());
    e.values = read_le_f32(win, count);
    if (!win) throw std::runtime_error("truncated checkpoint weights in " + dir);
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace moltok::pipeline
