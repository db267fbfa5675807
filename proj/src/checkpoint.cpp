#include "promptpix/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace promptpix {

namespace {

constexpr char kMagic[8] = {'P', 'P', 'X', 'C', 'K', 'P', 'T', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw CheckpointError("cannot write checkpoint " + path.string());
  }
  template <typename T>
  void put(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void finish(const std::filesystem::path& path) {
    out_.flush();
    if (!out_) throw CheckpointError("write failed for checkpoint " + path.string());
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw CheckpointError("cannot open checkpoint " + path.string());
  }
  template <typename T>
  T get() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw CheckpointError("truncated checkpoint " + path_.string());
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
};

}  // namespace

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  Writer w(path);
  w.bytes(kMagic, sizeof kMagic);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.metadata.size()));
  w.bytes(ckpt.metadata.data(), ckpt.metadata.size());
  w.put<std::uint64_t>(ckpt.tensors.size());
  for (const auto& [name, p] : ckpt.tensors) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.put<std::uint8_t>(p.tunable ? 1 : 0);
    w.put<std::uint32_t>(2);
    w.put<std::uint64_t>(static_cast<std::uint64_t>(p.value.rows()));
    w.put<std::uint64_t>(static_cast<std::uint64_t>(p.value.cols()));
    w.bytes(p.value.data(), sizeof(double) * static_cast<std::size_t>(p.value.size()));
  }
  w.finish(path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw CheckpointError("not a checkpoint file: " + path.string());
  Checkpoint ckpt;
  ckpt.metadata.resize(r.get<std::uint32_t>());
  r.bytes(ckpt.metadata.data(), ckpt.metadata.size());
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name(r.get<std::uint32_t>(), '\0');
    r.bytes(name.data(), name.size());
    const auto tag = r.get<std::uint8_t>();
    if (tag > 1) throw CheckpointError("bad frozen/tunable tag for " + name);
    const auto rank = r.get<std::uint32_t>();
    if (rank < 1 || rank > 2) throw CheckpointError("unsupported rank for " + name);
    std::uint64_t rows = r.get<std::uint64_t>();
    std::uint64_t cols = rank == 2 ? r.get<std::uint64_t>() : 1;
    if (rank == 1) std::swap(rows, cols);
    if (rows == 0 || cols == 0 || rows * cols > (1ull << 31)) throw CheckpointError("bad extents for " + name);
    Parameter p{Matrix(static_cast<Index>(rows), static_cast<Index>(cols)), tag == 1};
    r.bytes(p.value.data(), sizeof(double) * rows * cols);
    if (!ckpt.tensors.emplace(std::move(name), std::move(p)).second) throw CheckpointError("duplicate tensor name in checkpoint");
  }
  if (!r.at_end()) throw CheckpointError("trailing bytes in checkpoint " + path.string());
  return ckpt;
}

void save_model(const ModelParams& model, const RunConfig& cfg, const std::filesystem::path& path) {
  Checkpoint ckpt;
  ckpt.metadata = to_json(cfg).dump();
  ckpt.tensors = model.tensors;
  write_checkpoint(ckpt, path);
}

ModelParams load_model(const std::filesystem::path& path, RunConfig* cfg_out, const RunConfig* override_cfg) {
  Checkpoint ckpt = read_checkpoint(path);
  RunConfig cfg;
  if (override_cfg) {
    cfg = *override_cfg;
  } else {
    try {
      cfg = run_config_from_json(nlohmann::json::parse(ckpt.metadata));
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("checkpoint metadata is not a config: ") + e.what());
    }
  }
  ModelParams model = build_model(cfg.backbone);
  if (model.tensors.size() != ckpt.tensors.size()) {
    throw IncompatibleCheckpointError("checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                                      std::to_string(model.tensors.size()));
  }
  for (auto& [name, p] : model.tensors) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw IncompatibleCheckpointError("checkpoint lacks tensor " + name);
    const Matrix& v = it->second.value;
    if (v.rows() != p.value.rows() || v.cols() != p.value.cols()) {
      throw IncompatibleCheckpointError("tensor " + name + " is " + shape_string(v.rows(), v.cols()) + " in checkpoint, model expects " +
                                        shape_string(p.value.rows(), p.value.cols()));
    }
    if (it->second.tunable != p.tunable) throw IncompatibleCheckpointError("tensor " + name + " has a different frozen/tunable tag");
    p.value = v;
  }
  if (cfg_out) *cfg_out = cfg;
  return model;
}

}  // namespace promptpix
