#pragma once

#include <cstddef>
#include <string>

#include <json.hpp>

namespace eapig {

enum class Activation { Gelu, Relu, Identity };
enum class Normalization { LayerNorm, None };

/// Architecture of a pre-layernorm decoder-only transformer.
///
/// `activation` and `normalization` default to the GPT-2 choices; the
/// `Identity`/`None` settings exist so toy models can be made exactly linear.
struct ModelConfig {
  std::size_t n_layers = 1;
  std::size_t n_heads = 1;
  std::size_t d_model = 4;
  std::size_t d_head = 4;
  std::size_t d_mlp = 8;
  std::size_t vocab_size = 8;
  std::size_t max_seq_len = 8;
  double ln_eps = 1e-5;
  Activation activation = Activation::Gelu;
  Normalization normalization = Normalization::LayerNorm;

  /// Throws LoadError when a count is zero or ln_eps is not positive.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::string to_string(Activation a);
std::string to_string(Normalization n);
Activation activation_from_string(const std::string& s);
Normalization normalization_from_string(const std::string& s);

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace eapig
