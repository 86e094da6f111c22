#include "meshseq/param_store.hpp"

#include <cstring>
#include <fstream>

namespace meshseq {

Param& ParameterStore::create(const std::string& name, Tensor value, bool trainable) {
  require(!params_.count(name), "ParameterStore: duplicate parameter " + name);
  Param p;
  p.value = std::move(value);
  p.trainable = trainable;
  auto [it, inserted] = params_.emplace(name, std::move(p));
  (void)inserted;
  return it->second;
}

Param& ParameterStore::get(const std::string& name) {
  auto it = params_.find(name);
  require(it != params_.end(), "ParameterStore: unknown parameter " + name);
  return it->second;
}

const Param& ParameterStore::get(const std::string& name) const {
  auto it = params_.find(name);
  require(it != params_.end(), "ParameterStore: unknown parameter " + name);
  return it->second;
}

std::size_t ParameterStore::total_values() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += p.value.size();
  return n;
}

std::size_t ParameterStore::trainable_values() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_)
    if (p.trainable) n += p.value.size();
  return n;
}

namespace {

constexpr char kMagic[4] = {'C', 'S', 'H', 'W'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(!in.fail(), "checkpoint file truncated");
  return v;
}

std::size_t dtype_size(CheckpointDtype d) {
  return d == CheckpointDtype::f64 ? 8 : 4;
}

}  // namespace

void save_checkpoint(const ParameterStore& store, const std::string& path,
                     CheckpointDtype dtype) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "save_checkpoint: cannot open " + path);
  out.write(kMagic, 4);
  write_pod(out, kVersion);
  write_pod(out, static_cast<std::uint32_t>(store.entries().size()));

  // manifest size is known up front, so offsets can be assigned in one pass
  std::uint64_t header = 4 + 4 + 4;
  for (const auto& [name, p] : store.entries())
    header += 4 + name.size() + 1 + 4 + 8 * p.value.rank() + 8;

  std::uint64_t offset = header;
  for (const auto& [name, p] : store.entries()) {
    write_pod(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(out, static_cast<std::uint8_t>(dtype));
    write_pod(out, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) write_pod(out, static_cast<std::uint64_t>(d));
    write_pod(out, offset);
    offset += p.value.size() * dtype_size(dtype);
  }
  for (const auto& [name, p] : store.entries()) {
    (void)name;
    if (dtype == CheckpointDtype::f64) {
      out.write(reinterpret_cast<const char*>(p.value.data()),
                static_cast<std::streamsize>(p.value.size() * 8));
    } else {
      std::vector<float> buf(p.value.size());
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(p.value[i]);
      out.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * 4));
    }
  }
  require(out.good(), "save_checkpoint: write failed for " + path);
  out.close();

  std::ofstream side(path + ".trainable");
  require(side.good(), "save_checkpoint: cannot open sidecar for " + path);
  for (const auto& [name, p] : store.entries())
    side << name << ' ' << (p.trainable ? 1 : 0) << '\n';
  require(side.good(), "save_checkpoint: sidecar write failed for " + path);
}

std::vector<CheckpointEntry> read_checkpoint_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "read_checkpoint_manifest: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  require(!in.fail() && std::memcmp(magic, kMagic, 4) == 0,
          "read_checkpoint_manifest: bad magic in " + path);
  const std::uint32_t version = read_pod<std::uint32_t>(in);
  require(version == kVersion, "read_checkpoint_manifest: unsupported version");
  const std::uint32_t count = read_pod<std::uint32_t>(in);
  std::vector<CheckpointEntry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const std::uint32_t name_len = read_pod<std::uint32_t>(in);
    e.name.resize(name_len);
    in.read(e.name.data(), name_len);
    require(!in.fail(), "read_checkpoint_manifest: truncated name");
    const std::uint8_t dtype = read_pod<std::uint8_t>(in);
    require(dtype <= 1, "read_checkpoint_manifest: bad dtype");
    e.dtype = static_cast<CheckpointDtype>(dtype);
    const std::uint32_t rank = read_pod<std::uint32_t>(in);
    for (std::uint32_t r = 0; r < rank; ++r)
      e.shape.push_back(static_cast<std::size_t>(read_pod<std::uint64_t>(in)));
    e.offset = read_pod<std::uint64_t>(in);
    entries.push_back(std::move(e));
  }
  return entries;
}

Tensor read_checkpoint_tensor(const std::string& path, const CheckpointEntry& entry) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "read_checkpoint_tensor: cannot open " + path);
  in.seekg(static_cast<std::streamoff>(entry.offset));
  Tensor t(entry.shape);
  if (entry.dtype == CheckpointDtype::f64) {
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * 8));
  } else {
    std::vector<float> buf(t.size());
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    for (std::size_t i = 0; i < buf.size(); ++i) t[i] = static_cast<double>(buf[i]);
  }
  require(!in.fail(), "read_checkpoint_tensor: truncated array for " + entry.name);
  return t;
}

ParameterStore load_checkpoint(const std::string& path) {
  ParameterStore store;
  for (const auto& entry : read_checkpoint_manifest(path))
    store.create(entry.name, read_checkpoint_tensor(path, entry), true);

  std::ifstream side(path + ".trainable");
  if (side.good()) {
    std::string name;
    int flag;
    while (side >> name >> flag) {
      if (store.contains(name)) store.get(name).trainable = flag != 0;
    }
  }
  return store;
}

}  // namespace meshseq
