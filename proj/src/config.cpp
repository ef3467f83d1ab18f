#include "eapig/config.hpp"

#include "eapig/error.hpp"

namespace eapig {

void ModelConfig::validate() const {
  const std::pair<const char*, std::size_t> counts[] = {
      {"n_layers", n_layers}, {"n_heads", n_heads},       {"d_model", d_model},
      {"d_head", d_head},     {"d_mlp", d_mlp},           {"vocab_size", vocab_size},
      {"max_seq_len", max_seq_len}};
  for (const auto& [name, value] : counts) {
    if (value < 1) throw LoadError(std::string("config: ") + name + " must be >= 1");
  }
  if (!(ln_eps > 0.0)) throw LoadError("config: ln_eps must be > 0");
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::Gelu: return "gelu";
    case Activation::Relu: return "relu";
    case Activation::Identity: return "identity";
  }
  return "gelu";
}

std::string to_string(Normalization n) {
  return n == Normalization::LayerNorm ? "layernorm" : "none";
}

Activation activation_from_string(const std::string& s) {
  if (s == "gelu") return Activation::Gelu;
  if (s == "relu") return Activation::Relu;
  if (s == "identity") return Activation::Identity;
  throw LoadError("config: unknown activation '" + s + "'");
}

Normalization normalization_from_string(const std::string& s) {
  if (s == "layernorm") return Normalization::LayerNorm;
  if (s == "none") return Normalization::None;
  throw LoadError("config: unknown normalization '" + s + "'");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},
                     {"d_model", c.d_model},
                     {"d_head", c.d_head},
                     {"d_mlp", c.d_mlp},
                     {"vocab_size", c.vocab_size},
                     {"max_seq_len", c.max_seq_len},
                     {"ln_eps", c.ln_eps},
                     {"activation", to_string(c.activation)},
                     {"normalization", to_string(c.normalization)}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  try {
    j.at("n_layers").get_to(c.n_layers);
    j.at("n_heads").get_to(c.n_heads);
    j.at("d_model").get_to(c.d_model);
    j.at("d_head").get_to(c.d_head);
    j.at("d_mlp").get_to(c.d_mlp);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("max_seq_len").get_to(c.max_seq_len);
    c.ln_eps = j.value("ln_eps", 1e-5);
    c.activation = activation_from_string(j.value("activation", std::string("gelu")));
    c.normalization =
        normalization_from_string(j.value("normalization", std::string("layernorm")));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("config: ") + e.what());
  }
}

}  // namespace eapig
