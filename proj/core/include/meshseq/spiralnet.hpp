#pragma once

#include <string>

#include "meshseq/graph.hpp"
#include "meshseq/model.hpp"

namespace meshseq {

// Graph builders for the mesh encoder/decoder. Parameters are looked up by
// name under `prefix`; the hierarchy must outlive the graph.

// Spiral convolution: gamma applied to the concatenation of the spiral-
// gathered feature vectors (zeros at pads). Weights prefix.w0/.b0[, .w1...].
ValueId spiral_conv(Graph& g, ParameterStore& store, ValueId x, const SpiralTable& table,
                    const std::string& prefix, std::size_t gamma_depth = 1);

// conv -> norm -> ELU -> conv -> norm, plus skip (identity when cin == cout,
// learned 1x1 otherwise), then ELU.
ValueId res_block(Graph& g, ParameterStore& store, ValueId x, const SpiralTable& table,
                  const std::string& prefix, std::size_t cin, std::size_t cout,
                  NormMode norm_mode, std::size_t gamma_depth = 1);

// coords: template-resolution V x 3 -> [1 x D]
ValueId encode_mesh(Graph& g, ParameterStore& store, ValueId coords,
                    const MeshHierarchy& hierarchy, const ModelConfig& cfg);

// [1 x D] -> deformation field V x 3 at template resolution
ValueId decode_embedding(Graph& g, ParameterStore& store, ValueId z,
                         const MeshHierarchy& hierarchy, const ModelConfig& cfg);

// Inference conveniences (fresh graph per call).
Tensor encode(const Tensor& coords, ParameterStore& store, const MeshHierarchy& hierarchy,
              const ModelConfig& cfg);
Tensor decode(const Tensor& embedding, ParameterStore& store, const MeshHierarchy& hierarchy,
              const ModelConfig& cfg);

}  // namespace meshseq
