// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>

#include "bwta/layers.hpp"

namespace bwta {

struct ModelConfig {
  std::size_t seq_len = 8;
  std::size_t d_in = 16;
  std::size_t classes = 2;
  BlockConfig block{16, 2, 32, 0.0, true};

  void validate() const;
};

/// Sequence classifier: FP token embedding, one BWTA transformer block, mean
/// pooling over tokens and an FP linear head.
class ToyClassifier {
 public:
  struct Cache {
    DoubleMatrix x;
    DoubleMatrix embedded;
    TransformerBlock::Cache block;
    DoubleMatrix pooled;
  };

  ToyClassifier() = default;
  ToyClassifier(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  /// Logits [1 x classes] for one [seq_len x d_in] sequence.
  DoubleMatrix forward_train(const DoubleMatrix& x, QuantTrace& trace, Cache* cache) const;
  void backward(const Cache& cache, const DoubleMatrix& dlogits, const QuantTrace& trace);

  /// Inference logits. A quantized block at L = 1 runs the packed kernels;
  /// earlier stages use fake quantization.
  DenseMatrix logits(const DenseMatrix& x, const KernelConfig& kcfg = {}) const;
  std::size_t predict(const DenseMatrix& x, const KernelConfig& kcfg = {}) const;

  DenseMatrix embed_tokens(const DenseMatrix& x) const { return embed.forward(x); }
  void visit_params(const ParamVisitor& visit);

  DenseLinear embed;
  TransformerBlock block;
  DenseLinear head;

 private:
  void check_input(std::size_t rows, std::size_t cols) const;
  ModelConfig cfg_;
};

/// Writes one .bwta per packed weight (scale field = s_W), FP tensors as
/// text and a key=value manifest. Requires the block at L = 1.
void save_checkpoint(const ToyClassifier& model, const std::filesystem::path& dir);

/// Rebuilds an inference-only classifier (no latent binary weights).
ToyClassifier load_checkpoint(const std::filesystem::path& dir);

}  // namespace bwta
