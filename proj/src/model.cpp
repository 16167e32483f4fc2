#include "slimfit/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace slimfit {

void ModelConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v < 1) throw ConfigError(std::string(what) + " must be >= 1, got " + std::to_string(v));
  };
  positive(layers, "layers");
  positive(hidden, "hidden");
  positive(heads, "heads");
  positive(max_seq, "max_seq");
  positive(vocab, "vocab");
  positive(num_classes, "num_classes");
  if (hidden % heads != 0)
    throw ConfigError("hidden size " + std::to_string(hidden) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  if (!(layernorm_eps > 0.0)) throw ConfigError("layernorm_eps must be positive");
}

ModelConfig ModelConfig::bert_base() {
  ModelConfig c;
  c.layers = 12;
  c.hidden = 768;
  c.heads = 12;
  c.max_seq = 512;
  c.vocab = 30522;
  c.num_classes = 2;
  return c;
}

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Embedding: return "embedding";
    case LayerKind::Dense: return "dense";
    case LayerKind::LayerNorm: return "layernorm";
  }
  return "?";
}

LayerRegistry::LayerRegistry(const ModelConfig& config) {
  config.validate();
  auto push = [this](std::string name, LayerKind kind, int block) {
    layers_.push_back(LayerInfo{static_cast<int>(layers_.size()), std::move(name), kind, block});
  };
  push("bert.embeddings.word_embeddings", LayerKind::Embedding, -1);
  push("bert.embeddings.position_embeddings", LayerKind::Embedding, -1);
  push("bert.embeddings.token_type_embeddings", LayerKind::Embedding, -1);
  push("bert.embeddings.LayerNorm", LayerKind::LayerNorm, -1);
  for (int i = 0; i < config.layers; ++i) {
    const std::string p = "bert.encoder.layer." + std::to_string(i) + ".";
    push(p + "attention.self.query", LayerKind::Dense, i);
    push(p + "attention.self.key", LayerKind::Dense, i);
    push(p + "attention.self.value", LayerKind::Dense, i);
    push(p + "attention.output.dense", LayerKind::Dense, i);
    push(p + "attention.output.LayerNorm", LayerKind::LayerNorm, i);
    push(p + "intermediate.dense", LayerKind::Dense, i);
    push(p + "output.dense", LayerKind::Dense, i);
    push(p + "output.LayerNorm", LayerKind::LayerNorm, i);
  }
  push("bert.pooler.dense", LayerKind::Dense, -1);
  push("classifier", LayerKind::Dense, -1);
}

const LayerInfo& LayerRegistry::at(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= layers_.size())
    throw RegistryError("unknown layer id " + std::to_string(id));
  return layers_[static_cast<std::size_t>(id)];
}

int LayerRegistry::find(const std::string& name) const {
  for (const auto& l : layers_)
    if (l.name == name) return l.id;
  throw RegistryError("unknown layer name '" + name + "'");
}

std::string activation_label(const LayerRegistry& registry, int layer_id, const std::string& suffix) {
  return registry.at(layer_id).name + "." + suffix;
}

std::string block_label(int block, const std::string& what) {
  return "bert.encoder.layer." + std::to_string(block) + "." + what;
}

double truncated_normal(std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (;;) {
    const double z = n(rng);
    if (std::abs(z) <= 2.0) return z * stddev;
  }
}

namespace {

void write_f32(std::ostream& os, float v) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  unsigned char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(buf), 4);
}

float read_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

std::filesystem::path with_suffix(const std::filesystem::path& prefix, const char* ext) {
  return std::filesystem::path(prefix.string() + ext);
}

}  // namespace

void save_checkpoint(const Model<float>& model, const std::filesystem::path& prefix) {
  std::ofstream bin(with_suffix(prefix, ".bin"), std::ios::binary);
  std::ofstream manifest(with_suffix(prefix, ".manifest"));
  if (!bin || !manifest) throw std::runtime_error("cannot open checkpoint files at " + prefix.string());
  std::size_t offset = 0;
  for (const auto& p : model.parameters()) {
    manifest << p.name << '\t';
    const auto& dims = p.value.shape().dims();
    for (std::size_t i = 0; i < dims.size(); ++i) manifest << (i ? "," : "") << dims[i];
    manifest << '\t' << offset << '\n';
    for (Index i = 0; i < p.value.numel(); ++i) write_f32(bin, p.value[i]);
    offset += static_cast<std::size_t>(p.value.numel()) * 4;
  }
  if (!bin || !manifest) throw std::runtime_error("failed writing checkpoint " + prefix.string());
}

void load_checkpoint(Model<float>& model, const std::filesystem::path& prefix) {
  std::ifstream bin(with_suffix(prefix, ".bin"), std::ios::binary);
  std::ifstream manifest(with_suffix(prefix, ".manifest"));
  if (!bin || !manifest) throw std::runtime_error("cannot open checkpoint files at " + prefix.string());
  const std::vector<unsigned char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  std::string line;
  std::size_t lineno = 0;
  std::size_t seen = 0;
  while (std::getline(manifest, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, dims_text;
    std::size_t offset = 0;
    if (!std::getline(ls, name, '\t') || !std::getline(ls, dims_text, '\t') || !(ls >> offset))
      throw std::runtime_error("checkpoint manifest line " + std::to_string(lineno) + ": malformed");
    auto it = std::find_if(model.parameters().begin(), model.parameters().end(),
                           [&](const auto& p) { return p.name == name; });
    if (it == model.parameters().end())
      throw std::runtime_error("checkpoint manifest line " + std::to_string(lineno) + ": unknown parameter " + name);
    std::vector<Index> dims;
    std::istringstream ds(dims_text);
    for (std::string d; std::getline(ds, d, ',');) dims.push_back(std::stoll(d));
    if (Shape(dims) != it->value.shape())
      throw std::runtime_error("checkpoint parameter " + name + " has shape " + Shape(dims).str() + ", model expects " +
                               it->value.shape().str());
    const auto n = static_cast<std::size_t>(it->value.numel());
    if (offset + 4 * n > blob.size()) throw std::runtime_error("checkpoint data truncated at " + name);
    for (std::size_t i = 0; i < n; ++i) it->value[static_cast<Index>(i)] = read_f32(blob.data() + offset + 4 * i);
    ++seen;
  }
  if (seen != model.parameters().size())
    throw std::runtime_error("checkpoint covers " + std::to_string(seen) + " of " +
                             std::to_string(model.parameters().size()) + " parameters");
}

}  // namespace slimfit
