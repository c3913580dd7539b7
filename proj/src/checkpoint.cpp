// SPDX-License-Identifier: Apache-2.0

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "sitsdeco/model.hpp"

namespace sitsdeco {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'S', 'I', 'T', 'S', 'D', 'E', 'C', 'O'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end, const std::filesystem::path& path)
      : bytes_(bytes), end_(end), path_(path) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void read_floats(float* dst, std::size_t n) {
    need(n * sizeof(float));
    std::memcpy(dst, bytes_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw ConfigError(path_.string() + ": truncated checkpoint");
  }
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
  const std::filesystem::path& path_;
};

nlohmann::json config_json(const ModelConfig& c) {
  return {{"n_blocks", c.n_blocks},           {"n_heads", c.n_heads},
          {"d_model", c.d_model},             {"mlp_expansion", c.mlp_expansion},
          {"max_day_index", c.max_day_index}, {"max_position_index", c.max_position_index},
          {"input_width", c.input_width},     {"output_width", c.output_width}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_blocks = j.at("n_blocks");
  c.n_heads = j.at("n_heads");
  c.d_model = j.at("d_model");
  c.mlp_expansion = j.at("mlp_expansion");
  c.max_day_index = j.at("max_day_index");
  c.max_position_index = j.at("max_position_index");
  c.input_width = j.at("input_width");
  c.output_width = j.at("output_width");
  return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (ckpt.params.config() != ckpt.config) throw std::invalid_argument("checkpoint params/config mismatch");
  const nlohmann::json header = {{"config", config_json(ckpt.config)},
                                 {"layout", serialize_layout_config(ckpt.layout)},
                                 {"metadata", ckpt.metadata}};
  const std::string header_text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(header_text.size()));
  out += header_text;
  const auto& tensors = ckpt.params.tensors();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& t = tensors[i];
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto s : t.shape) put<std::uint64_t>(out, s);
    const auto data = ckpt.params.tensor(i);
    out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
  }
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(out.data()), static_cast<uInt>(out.size())));
  put<std::uint32_t>(out, crc);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw ConfigError("cannot write checkpoint " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string bytes = ss.str();
  if (bytes.size() < sizeof(kMagic) + 12) throw ConfigError(path.string() + ": truncated checkpoint");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) throw ConfigError(path.string() + ": not a checkpoint");

  const std::size_t body = bytes.size() - sizeof(std::uint32_t);
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + body, sizeof(stored_crc));
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(body)));
  if (crc != stored_crc) throw ConfigError(path.string() + ": checksum mismatch");

  Reader r(bytes, body, path);
  r.get_string(sizeof(kMagic));
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw ConfigError(path.string() + ": unsupported version " + std::to_string(version));
  const auto header = nlohmann::json::parse(r.get_string(r.get<std::uint32_t>()));

  Checkpoint ckpt;
  ckpt.config = config_from_json(header.at("config"));
  ckpt.layout = parse_layout_config(header.at("layout").get<std::string>());
  ckpt.metadata = header.value("metadata", std::string());
  ckpt.params = Params<float>(ckpt.config);

  const auto count = r.get<std::uint32_t>();
  const auto& tensors = ckpt.params.tensors();
  if (count != tensors.size()) throw ConfigError(path.string() + ": tensor count does not match config");
  for (std::size_t i = 0; i < count; ++i) {
    const auto name = r.get_string(r.get<std::uint32_t>());
    if (name != tensors[i].name) throw ConfigError(path.string() + ": unexpected tensor '" + name + "'");
    const auto rank = r.get<std::uint32_t>();
    std::vector<std::size_t> shape(rank);
    for (auto& s : shape) s = static_cast<std::size_t>(r.get<std::uint64_t>());
    if (shape != tensors[i].shape) throw ConfigError(path.string() + ": shape mismatch for '" + name + "'");
    r.read_floats(ckpt.params.tensor(i).data(), tensors[i].size);
  }
  if (r.pos() != body) throw ConfigError(path.string() + ": trailing bytes in checkpoint");
  return ckpt;
}

}  // namespace sitsdeco
