#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "meshseq/hierarchy.hpp"
#include "meshseq/optimizer.hpp"
#include "meshseq/param_store.hpp"

namespace meshseq {

enum class NormMode { vertex, batch };

struct TransformerConfig {
  std::size_t blocks = 2;
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t hidden = 64;
  std::size_t max_slots = kMaxSlots;
};

struct SpiralNetConfig {
  std::vector<std::size_t> channels;  // one per hierarchy level
  std::vector<LevelSpec> levels;
  std::size_t gamma_depth = 1;  // layers in the spiral-conv MLP
};

struct TrainConfig {
  AdamConfig adam;
  std::size_t epochs = 1000;
  std::size_t batch_size = 4;
  double lambda_cda = 1e-6;
  std::size_t patience = 100;  // early stopping on validation loss; 0 = off
};

struct ModelConfig {
  std::string preset = "toy32";
  TransformerConfig transformer;
  SpiralNetConfig mesh;
  NormMode norm_mode = NormMode::vertex;
  TrainConfig train;

  std::size_t dim() const { return transformer.dim; }
};

// Simple key=value text config (lines, '#' comments). Values keep their raw
// string form until queried.
class KeyValues {
 public:
  static KeyValues from_file(const std::string& path);
  static KeyValues from_string(const std::string& text);

  bool has(const std::string& key) const { return kv_.count(key) != 0; }
  std::string get(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::vector<std::size_t> get_sizes(const std::string& key,
                                     std::vector<std::size_t> fallback) const;
  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

// Built-in presets: toy, toy32, gpt2, vit_base, vit_large.
bool is_model_preset(const std::string& name);
ModelConfig model_preset(const std::string& name);
// name_or_path: a preset name or a key=value file (which may itself start
// from a `preset =` base).
ModelConfig resolve_model_config(const std::string& name_or_path);
ModelConfig apply_key_values(ModelConfig base, const KeyValues& kv);

// Canonical text form of the resolved config; its FNV-1a hash goes into the
// run manifest.
std::string canonical_config(const ModelConfig& cfg);
std::uint64_t config_hash(const ModelConfig& cfg);

// --- parameter layout ---

struct ModelSpecOptions {
  bool frozen = false;           // transformer trainability limited to LN scale/shift
  bool classifier_head = false;  // add a binary classification head
};

// True for transformer LayerNorm scale/shift parameters (all blocks plus the
// final LN): the only transformer weights trained in frozen mode.
bool is_transformer_ln_param(const std::string& name);
bool is_transformer_param(const std::string& name);

std::vector<ParamSpec> transformer_param_specs(const TransformerConfig& cfg, bool frozen);
std::vector<ParamSpec> build_param_specs(const ModelConfig& cfg, const MeshHierarchy& hierarchy,
                                         const ModelSpecOptions& opts = {});

struct ParamCount {
  std::size_t total = 0;
  std::size_t trainable = 0;
  double trainable_fraction() const {
    return total == 0 ? 0.0 : static_cast<double>(trainable) / static_cast<double>(total);
  }
};
ParamCount count_params(const std::vector<ParamSpec>& specs);

// Seeded random initialization; each parameter draws from its own stream
// keyed by name, so values do not depend on creation order.
ParameterStore init_store(const std::vector<ParamSpec>& specs, std::uint64_t seed);

void validate_model_config(const ModelConfig& cfg);

}  // namespace meshseq
