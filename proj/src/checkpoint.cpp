#include "advlab/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace advlab {

namespace {

nlohmann::json config_json(const ModelConfig& c) {
  nlohmann::json j;
  j["vocab_size"] = c.vocab_size;
  j["embedding_dim"] = c.embedding_dim;
  j["heads"] = c.heads;
  j["blocks"] = c.blocks;
  j["ffn_dim"] = c.ffn_dim;
  j["max_len"] = c.max_len;
  j["dropout"] = c.dropout;
  j["classes"] = c.classes;
  j["init_std"] = c.init_std;
  return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.embedding_dim = j.at("embedding_dim").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.blocks = j.at("blocks").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.classes = j.at("classes").get<std::size_t>();
  c.init_std = j.at("init_std").get<double>();
  return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelParams& params,
                     std::uint64_t seed) {
  nlohmann::json manifest = nlohmann::json::array();
  std::size_t offset = 0;  // bytes past the header newline
  const auto named = params.named_tensors();
  for (const auto& [name, t] : named) {
    nlohmann::json entry;
    entry["name"] = name;
    entry["shape"] = t->shape();
    entry["offset"] = offset;
    manifest.push_back(entry);
    offset += t->size() * sizeof(double);
  }
  nlohmann::json header;
  header["format_version"] = 1;
  header["config"] = config_json(cfg);
  header["seed"] = seed;
  header["manifest"] = manifest;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << header.dump() << '\n';
  for (const auto& [name, t] : named)
    out.write(reinterpret_cast<const char*>(t->data()),
              static_cast<std::streamsize>(t->size() * sizeof(double)));
  if (!out) throw std::runtime_error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string header_line;
  if (!std::getline(in, header_line)) throw std::runtime_error(path + ": missing header");
  nlohmann::json header = nlohmann::json::parse(header_line);
  if (header.at("format_version").get<int>() != 1)
    throw std::runtime_error(path + ": unsupported format version");

  Checkpoint ckpt;
  ckpt.config = config_from_json(header.at("config"));
  ckpt.config.validate();
  ckpt.seed = header.at("seed").get<std::uint64_t>();

  // Shapes come from the config; the manifest must agree entry by entry.
  RngState scratch(0);
  ckpt.params = ModelParams::init(ckpt.config, scratch);
  auto named = ckpt.params.named_tensors();
  const nlohmann::json& manifest = header.at("manifest");
  if (manifest.size() != named.size())
    throw std::runtime_error(path + ": manifest has " + std::to_string(manifest.size()) +
                             " arrays, expected " + std::to_string(named.size()));
  std::size_t offset = 0;
  for (std::size_t i = 0; i < named.size(); ++i) {
    const nlohmann::json& entry = manifest[i];
    Tensor* t = named[i].second;
    if (entry.at("name").get<std::string>() != named[i].first)
      throw std::runtime_error(path + ": manifest array '" +
                               entry.at("name").get<std::string>() + "' where '" +
                               named[i].first + "' expected");
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    if (shape != t->shape())
      throw std::runtime_error(path + ": shape mismatch for " + named[i].first + ": file has " +
                               shape_str(shape) + ", config implies " + shape_str(t->shape()));
    if (entry.at("offset").get<std::size_t>() != offset)
      throw std::runtime_error(path + ": bad offset for " + named[i].first);
    in.read(reinterpret_cast<char*>(t->data()),
            static_cast<std::streamsize>(t->size() * sizeof(double)));
    if (!in) throw std::runtime_error(path + ": truncated array " + named[i].first);
    offset += t->size() * sizeof(double);
  }
  if (!all_finite(ckpt.params.embedding.values()))
    throw NumericalError(path + ": non-finite parameters");
  return ckpt;
}

}  // namespace advlab
