#include "t2icount/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "t2icount/config.hpp"
#include "t2icount/hash.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace t2i {

namespace {

constexpr char kMagic[8] = {'T', '2', 'I', 'C', 'K', 'P', 'T', '1'};

}  // namespace

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  std::vector<double> payload;
  json table = json::array();
  for (const auto& t : ckpt.tensors) {
    table.push_back({{"name", t.name}, {"rows", t.value.rows()}, {"cols", t.value.cols()}, {"offset", payload.size()}});
    payload.insert(payload.end(), t.value.data(), t.value.data() + t.value.size());
  }
  const std::size_t bytes = payload.size() * sizeof(double);
  const json header = {{"config", ckpt.config},
                       {"config_hash", config_hash(ckpt.config)},
                       {"state", ckpt.state},
                       {"tensors", table},
                       {"payload_bytes", bytes},
                       {"payload_fnv64", hex64(fnv1a(payload.data(), bytes))}};
  const std::string text = header.dump();
  const std::uint64_t len = text.size();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    const std::uint64_t header_digest = fnv1a(text);
    out.write(reinterpret_cast<const char*>(&header_digest), sizeof(header_digest));
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(bytes));
    if (!out) throw CheckpointError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[sizeof(kMagic)];
  std::uint64_t len = 0;
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError(path.string() + ": not a checkpoint file");
  if (!in.read(reinterpret_cast<char*>(&len), sizeof(len)) || len > (1ULL << 31))
    throw CheckpointError(path.string() + ": corrupt header length");
  std::string text(len, '\0');
  std::uint64_t header_digest = 0;
  if (!in.read(text.data(), static_cast<std::streamsize>(len)) ||
      !in.read(reinterpret_cast<char*>(&header_digest), sizeof(header_digest)))
    throw CheckpointError(path.string() + ": truncated header");
  if (fnv1a(text) != header_digest) throw CheckpointError(path.string() + ": header integrity check failed");
  const json header = json::parse(text, nullptr, false);
  if (header.is_discarded() || !header.is_object()) throw CheckpointError(path.string() + ": corrupt header");

  Checkpoint ckpt;
  try {
    ckpt.config = header.at("config");
    ckpt.state = header.at("state");
    if (header.at("config_hash").get<std::string>() != config_hash(ckpt.config))
      throw CheckpointError(path.string() + ": config hash mismatch");
    const auto bytes = header.at("payload_bytes").get<std::size_t>();
    std::vector<double> payload(bytes / sizeof(double));
    if (!in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(bytes)))
      throw CheckpointError(path.string() + ": truncated payload");
    if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError(path.string() + ": trailing bytes");
    if (hex64(fnv1a(payload.data(), bytes)) != header.at("payload_fnv64").get<std::string>())
      throw CheckpointError(path.string() + ": payload integrity check failed");
    for (const auto& t : header.at("tensors")) {
      const auto rows = t.at("rows").get<Eigen::Index>(), cols = t.at("cols").get<Eigen::Index>();
      const auto offset = t.at("offset").get<std::size_t>();
      if (offset + static_cast<std::size_t>(rows * cols) > payload.size())
        throw CheckpointError(path.string() + ": tensor table points past the payload");
      Mat<Real> m = Eigen::Map<const Mat<Real>>(payload.data() + offset, rows, cols);
      ckpt.tensors.push_back({t.at("name").get<std::string>(), std::move(m)});
    }
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": malformed header (" + e.what() + ")");
  }
  return ckpt;
}

void add_parameters(Checkpoint& ckpt, const nn::ParameterStore<Real>& store) {
  for (const auto& p : store.all()) ckpt.tensors.push_back({"param/" + p.name, p.var.value()});
}

void restore_parameters(const Checkpoint& ckpt, nn::ParameterStore<Real>& store) {
  for (auto& p : store.all()) {
    const auto* t = ckpt.find("param/" + p.name);
    if (!t) throw CheckpointError("checkpoint lacks parameter " + p.name);
    if (t->value.rows() != p.var.rows() || t->value.cols() != p.var.cols())
      throw CheckpointError("checkpoint parameter " + p.name + " has a different shape");
    p.var.mutable_value() = t->value;
  }
}

}  // namespace t2i
