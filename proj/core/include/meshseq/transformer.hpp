#pragma once

#include <map>
#include <string>
#include <vector>

#include "meshseq/graph.hpp"
#include "meshseq/model.hpp"

namespace meshseq {

// Pre-LN encoder block: x <- x + MHA(LN(x), key_mask); x <- x + MLP(LN(x)).
// key_masked[t] != 0 excludes slot t as an attention key; masked keys get
// exactly zero attention weight. Queries at masked positions still produce
// outputs. Requires at least one unmasked key.
ValueId encoder_block(Graph& g, ParameterStore& store, ValueId x,
                      const std::vector<std::uint8_t>& key_masked, const std::string& prefix,
                      const TransformerConfig& cfg);

// B stacked encoder blocks followed by the final LN. Outputs at every slot,
// including masked ones.
ValueId transformer_forward(Graph& g, ParameterStore& store, ValueId x,
                            const std::vector<std::uint8_t>& key_masked,
                            const TransformerConfig& cfg);

// slot_t = z_t + pos_t + ce_t (all dim D)
Tensor modulate(const Tensor& mesh_embedding, const Tensor& positional, const Tensor& cognitive);

// Name map file: lines `external_name -> internal_name`.
struct NameMap {
  std::map<std::string, std::string> external_to_internal;
  std::map<std::string, std::string> internal_to_external;

  std::string external_for(const std::string& internal) const {
    auto it = internal_to_external.find(internal);
    return it == internal_to_external.end() ? internal : it->second;
  }
};
NameMap load_name_map(const std::string& path);

// Builds the full model store for (cfg, hierarchy): transformer weights come
// from the checkpoint (via the name map), everything else (mesh encoder /
// decoder, positional and cognitive embeddings) is freshly initialized and
// trainable. With frozen=true only transformer LN scale/shift parameters stay
// trainable inside the transformer. A missing or shape-mismatched tensor
// rejects the load, naming the offender.
ParameterStore load_pretrained(const std::string& checkpoint_path, const ModelConfig& cfg,
                               const MeshHierarchy& hierarchy, const NameMap& names, bool frozen,
                               std::uint64_t fresh_seed, bool classifier_head = false);

}  // namespace meshseq
