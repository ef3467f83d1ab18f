#include "eapig/weights.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "eapig/error.hpp"

namespace eapig {

namespace {

using json = nlohmann::json;

std::string layer_prefix(std::size_t l) { return "blocks." + std::to_string(l) + "."; }

float float_from_le(const unsigned char* p) {
  std::uint32_t bits = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
                       (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

void float_to_le(float v, unsigned char* p) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  p[0] = static_cast<unsigned char>(bits);
  p[1] = static_cast<unsigned char>(bits >> 8);
  p[2] = static_cast<unsigned char>(bits >> 16);
  p[3] = static_cast<unsigned char>(bits >> 24);
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<TensorSpec> expected_tensors(const ModelConfig& c) {
  const std::size_t D = c.d_model, H = c.n_heads, Dh = c.d_head;
  std::vector<TensorSpec> out = {
      {"embed.W_E", {c.vocab_size, D}},
      {"embed.W_pos", {c.max_seq_len, D}},
  };
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto p = layer_prefix(l);
    out.push_back({p + "ln1.w", {D}});
    out.push_back({p + "ln1.b", {D}});
    out.push_back({p + "attn.W_Q", {H, D, Dh}});
    out.push_back({p + "attn.b_Q", {H, Dh}});
    out.push_back({p + "attn.W_K", {H, D, Dh}});
    out.push_back({p + "attn.b_K", {H, Dh}});
    out.push_back({p + "attn.W_V", {H, D, Dh}});
    out.push_back({p + "attn.b_V", {H, Dh}});
    out.push_back({p + "attn.W_O", {H, Dh, D}});
    out.push_back({p + "attn.b_O", {H, D}});
    out.push_back({p + "ln2.w", {D}});
    out.push_back({p + "ln2.b", {D}});
    out.push_back({p + "mlp.W_in", {D, c.d_mlp}});
    out.push_back({p + "mlp.b_in", {c.d_mlp}});
    out.push_back({p + "mlp.W_out", {c.d_mlp, D}});
    out.push_back({p + "mlp.b_out", {D}});
  }
  out.push_back({"ln_final.w", {D}});
  out.push_back({"ln_final.b", {D}});
  out.push_back({"unembed.W_U", {D, c.vocab_size}});
  out.push_back({"unembed.b_U", {c.vocab_size}});
  return out;
}

void WeightStore::insert(std::string name, Tensor<float> tensor) {
  if (auto it = index_.find(name); it != index_.end()) {
    entries_[it->second].second = std::move(tensor);
    return;
  }
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(tensor));
}

const Tensor<float>& WeightStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw LoadError("missing tensor '" + name + "'");
  return entries_[it->second].second;
}

Tensor<float>& WeightStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw LoadError("missing tensor '" + name + "'");
  return entries_[it->second].second;
}

void WeightStore::validate(const ModelConfig& config) const {
  for (const auto& spec : expected_tensors(config)) {
    if (!contains(spec.name)) throw LoadError("missing tensor '" + spec.name + "'");
    const auto& t = at(spec.name);
    if (t.shape() != spec.shape) {
      throw LoadError("tensor '" + spec.name + "' has shape " +
                      Tensor<float>::shape_string(t.shape()) + ", expected " +
                      Tensor<float>::shape_string(spec.shape));
    }
    for (float v : t.values()) {
      if (!std::isfinite(v)) throw LoadError("tensor '" + spec.name + "' has a non-finite value");
    }
  }
}

ModelBundle load_weights(const std::filesystem::path& manifest_path) {
  json manifest;
  {
    std::ifstream in(manifest_path);
    if (!in) throw LoadError("cannot open manifest " + manifest_path.string());
    try {
      manifest = json::parse(in);
    } catch (const json::parse_error& e) {
      throw LoadError("manifest " + manifest_path.string() + ": " + e.what());
    }
  }

  ModelBundle bundle;
  bundle.config = manifest.at("config").get<ModelConfig>();
  bundle.config.validate();

  if (!manifest.contains("blob") || !manifest.contains("tensors")) {
    throw LoadError("manifest must contain 'blob' and 'tensors'");
  }
  const auto blob_path = manifest_path.parent_path() / manifest["blob"].get<std::string>();
  const auto blob = read_file(blob_path);

  for (const auto& entry : manifest["tensors"]) {
    std::string name;
    try {
      name = entry.at("name").get<std::string>();
      if (entry.value("dtype", std::string("f32")) != "f32") {
        throw LoadError("tensor '" + name + "': only dtype f32 is supported");
      }
      const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
      const auto offset = entry.at("byte_offset").get<std::size_t>();
      const auto length = entry.at("byte_length").get<std::size_t>();
      const std::size_t count = Tensor<float>::element_count(shape);
      if (length != count * sizeof(float)) {
        throw LoadError("tensor '" + name + "': byte_length " + std::to_string(length) +
                        " does not match shape " + Tensor<float>::shape_string(shape));
      }
      if (offset > blob.size() || blob.size() - offset < length) {
        throw LoadError("tensor '" + name + "' lies outside the blob (" +
                        std::to_string(blob.size()) + " bytes)");
      }
      std::vector<float> values(count);
      for (std::size_t i = 0; i < count; ++i) {
        values[i] = float_from_le(blob.data() + offset + i * sizeof(float));
      }
      bundle.weights.insert(name, Tensor<float>(shape, std::move(values)));
    } catch (const json::exception& e) {
      throw LoadError("manifest tensor entry '" + name + "': " + e.what());
    }
  }
  bundle.weights.validate(bundle.config);
  return bundle;
}

void save_weights(const std::filesystem::path& manifest_path, const ModelConfig& config,
                  const WeightStore& weights) {
  weights.validate(config);
  auto blob_path = manifest_path;
  blob_path.replace_extension(".bin");

  json tensors = json::array();
  std::vector<unsigned char> blob;
  for (const auto& [name, t] : weights.entries()) {
    const std::size_t offset = blob.size();
    blob.resize(offset + t.size() * sizeof(float));
    for (std::size_t i = 0; i < t.size(); ++i) {
      float_to_le(t[i], blob.data() + offset + i * sizeof(float));
    }
    tensors.push_back({{"name", name},
                       {"dtype", "f32"},
                       {"shape", t.shape()},
                       {"byte_offset", offset},
                       {"byte_length", t.size() * sizeof(float)}});
  }

  json manifest = {{"config", config},
                   {"blob", blob_path.filename().string()},
                   {"tensors", tensors}};
  {
    std::ofstream out(blob_path, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write " + blob_path.string());
    out.write(reinterpret_cast<const char*>(blob.data()), std::streamsize(blob.size()));
  }
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw LoadError("cannot write " + manifest_path.string());
  out << manifest.dump(2) << '\n';
}

}  // namespace eapig
