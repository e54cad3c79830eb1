// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bwta/bitpack.hpp"
#include "bwta/gemm.hpp"
#include "bwta/quant.hpp"
#include "bwta/tensor.hpp"

namespace bwta {

struct Param {
  DenseMatrix value;
  DenseMatrix grad;

  Param() = default;
  explicit Param(DenseMatrix v) : value(std::move(v)), grad(value.rows(), value.cols()) {}
  void zero_grad() { grad = DenseMatrix(value.rows(), value.cols()); }
};

/// A learnable activation quantizer and its accumulated scale gradient.
struct ScaleParam {
  QuantState state;
  float grad = 0.0f;
};

enum class ParamKind { BinaryWeight, FullPrecision, Scale };

/// Visitor over trainable tensors. Scales are exposed as 1-element spans.
using ParamVisitor = std::function<void(const std::string& name, ParamKind kind,
                                        std::span<float> value, std::span<float> grad)>;

// ---------------------------------------------------------------------------
// Quantizer tracing for training passes

/// Controls how every activation quantizer in a training forward behaves.
/// Quantizers are addressed by a small integer slot so passes can collect
/// per-quantizer statistics or freeze rounding residuals.
struct QuantTrace {
  enum class Residuals { Off, Record, Replay };

  bool quantize = true;  // false: quantizers and weight binarization are identity
  /// Activation quantizers at slots >= this pass values through unchanged
  /// (forward only; used to calibrate scales one slot at a time).
  std::size_t quantized_slots = SIZE_MAX;
  Residuals residuals = Residuals::Off;
  std::vector<DoubleMatrix> frozen;  // recorded residuals, in call order
  std::size_t cursor = 0;

  /// When set, every quantizer input is appended here (row-flattened) per slot.
  std::vector<std::vector<float>>* collect = nullptr;

  /// When set, one code per quantized element (0 inside, 1 below, 2 above
  /// the clip range) and per ReLU input (3 active, 4 inactive), in call
  /// order. Two passes with equal patterns lie on the same smooth piece of
  /// the frozen-residual surrogate.
  std::vector<std::uint8_t>* pattern = nullptr;

  /// Quantizes (or passes through) one activation. In replay mode the
  /// frozen residual used is copied to `residual` for the backward pass.
  DoubleMatrix apply(std::size_t slot, const DoubleMatrix& a, const QuantState& state,
                     DoubleMatrix* residual = nullptr);
  void rewind() { cursor = 0; }
};

// ---------------------------------------------------------------------------
// Full-precision pieces

DenseMatrix softmax_rows(const DenseMatrix& x);
DoubleMatrix softmax_rows(const DoubleMatrix& x);
DenseMatrix relu(const DenseMatrix& x);
DoubleMatrix relu(const DoubleMatrix& x);

class DenseLinear {
 public:
  DenseLinear() = default;
  DenseLinear(std::size_t in, std::size_t out, std::uint64_t seed);

  std::size_t in_features() const { return weight.value.cols(); }
  std::size_t out_features() const { return weight.value.rows(); }

  DenseMatrix forward(const DenseMatrix& x) const;
  DoubleMatrix forward(const DoubleMatrix& x) const;
  /// Accumulates parameter gradients; returns d(input).
  DoubleMatrix backward(const DoubleMatrix& x, const DoubleMatrix& dy);

  Param weight;  // [out x in]
  Param bias;    // [1 x out]
};

class LayerNorm {
 public:
  struct Cache {
    DoubleMatrix xhat;
    std::vector<double> inv_std;
  };

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);

  DenseMatrix forward(const DenseMatrix& x) const;
  DoubleMatrix forward(const DoubleMatrix& x, Cache* cache = nullptr) const;
  DoubleMatrix backward(const Cache& cache, const DoubleMatrix& dy);

  float eps = 1e-5f;
  Param gamma;  // [1 x dim]
  Param beta;   // [1 x dim]
};

// ---------------------------------------------------------------------------
// BWTA layers

/// Binary-weight linear layer with a ternary (or boolean) input quantizer.
/// The packed sign weight, its scale s_W and mean are derived from the
/// latent weight and must be refreshed after every weight update.
class BwtaLinear {
 public:
  struct Cache {
    DoubleMatrix input;
    DoubleMatrix input_q;
    DoubleMatrix residual;  // set by replay passes
  };

  BwtaLinear() = default;
  BwtaLinear(DenseMatrix weight, QuantState act);
  /// Inference-only layer rebuilt from a stored packed weight.
  BwtaLinear(PackedBinaryMatrix packed, float weight_scale, QuantState act);

  std::size_t in_features() const { return packed_.cols; }
  std::size_t out_features() const { return packed_.rows; }
  bool has_latent() const { return !weight_.value.empty(); }

  /// Re-derives signs, s_W, mean and the packed words from the latent weight.
  void refresh();

  /// s_W * s_A * case1(packed W, packed A), laid out [N x out].
  DenseMatrix forward(const DenseMatrix& a, const KernelConfig& cfg = {}) const;
  /// Same product through the integer oracle on unpacked integers.
  DenseMatrix forward_reference(const DenseMatrix& a) const;
  /// Same product through gemm_f32 on the integer-valued dequantized operands.
  DenseMatrix forward_dequantized(const DenseMatrix& a) const;

  DoubleMatrix forward_train(const DoubleMatrix& a, std::size_t slot, QuantTrace& trace,
                             Cache* cache) const;
  DoubleMatrix backward(const Cache& cache, const DoubleMatrix& dy, const QuantTrace& trace);

  const PackedBinaryMatrix& packed_weight() const { return packed_; }
  float weight_scale() const { return weight_scale_; }
  float weight_mean() const { return weight_mean_; }
  const IntMatrix& weight_signs() const { return signs_; }

  Param& weight() { return weight_; }
  const Param& weight() const { return weight_; }
  ScaleParam act;

 private:
  template <typename M>
  void check_input(const M& a) const;
  IntMatrix quantized_input(const DenseMatrix& a) const;
  float output_scale() const { return weight_scale_ * act.state.scale; }

  Param weight_;  // latent [out x in]
  IntMatrix signs_;
  float weight_scale_ = 0.0f;
  float weight_mean_ = 0.0f;
  PackedBinaryMatrix packed_;
  DoubleMatrix weight_q_;  // s_W * signs, for training passes
};

/// (s_Q s_K / sqrt(D)) * case3(ternary(Q), ternary(K)), D = Q.cols.
DenseMatrix attention_scores(const DenseMatrix& q, const DenseMatrix& k, float s_q, float s_k,
                             const KernelConfig& cfg = {});
DenseMatrix attention_scores_reference(const DenseMatrix& q, const DenseMatrix& k, float s_q,
                                       float s_k);

/// s_Att s_V * case2(bool(Att), ternary(V^T)); Att must be non-negative.
DenseMatrix attention_context(const DenseMatrix& att, const DenseMatrix& v, float s_att,
                              float s_v, const KernelConfig& cfg = {});
DenseMatrix attention_context_reference(const DenseMatrix& att, const DenseMatrix& v, float s_att,
                                        float s_v);

// ---------------------------------------------------------------------------
// Transformer block

struct BlockConfig {
  std::size_t d_model = 16;
  std::size_t heads = 2;
  std::size_t d_ff = 32;
  double weight_init_std = 0.0;  // latent weight stddev; 0 selects 1/sqrt(fan_in)
  /// Overrides the stddev with sqrt(fan_out) so that s_W = ||W||_F / n_W
  /// comes out near 1/sqrt(fan_in) and the binary branch has unit gain.
  bool unit_gain_init = false;

  std::size_t head_dim() const { return d_model / heads; }
  void validate() const;
};

/// Per-layer attention quantizers (shared by all heads).
struct AttentionParams {
  ScaleParam q;
  ScaleParam k;
  ScaleParam v;
  ScaleParam prob;
  std::size_t heads = 1;
  std::size_t head_dim = 1;
};

enum QuantSlot : std::size_t {
  kSlotQProjIn,
  kSlotKProjIn,
  kSlotVProjIn,
  kSlotQuery,
  kSlotKey,
  kSlotValue,
  kSlotProb,
  kSlotOProjIn,
  kSlotFfn1In,
  kSlotFfn2In,
  kSlotCount
};

const char* slot_name(std::size_t slot);

/// Post-LN transformer block: BWTA Q/K/V/O projections, ternary x ternary
/// scores, FP softmax, boolean x ternary context, residual + LayerNorm, and a
/// BWTA FFN whose second layer consumes the boolean-quantized ReLU output.
class TransformerBlock {
 public:
  struct Cache {
    DoubleMatrix x;
    BwtaLinear::Cache q_in, k_in, v_in, o_in, f1_in, f2_in;
    DoubleMatrix q, k, v, qq, kq, vq;
    DoubleMatrix res_q, res_k, res_v, res_prob;  // set by replay passes
    DoubleMatrix prob, prob_q;  // heads stacked: [heads*T x T]
    DoubleMatrix context, attn_out;
    LayerNorm::Cache ln1, ln2;
    DoubleMatrix h1, u, r, f;
  };

  TransformerBlock() = default;
  TransformerBlock(const BlockConfig& cfg, std::uint64_t seed);

  const BlockConfig& config() const { return cfg_; }

  /// Inference. With quantization on, every matmul runs through the packed
  /// kernels and all quantizers must be at their final (L = 1) grids.
  DenseMatrix forward(const DenseMatrix& x, const KernelConfig& kcfg = {}) const;
  DoubleMatrix forward_train(const DoubleMatrix& x, QuantTrace& trace, Cache* cache) const;
  DoubleMatrix backward(const Cache& cache, const DoubleMatrix& dy, const QuantTrace& trace);

  /// Moves every activation quantizer to half-range L (unsigned ones to [0, L]).
  void set_levels(int levels);
  int levels() const;

  ScaleParam& scale(std::size_t slot);
  const ScaleParam& scale(std::size_t slot) const;

  /// Sets every activation scale to factor * 2 mean|A| of its input over
  /// `inputs`. Slots are calibrated in execution order with binarized
  /// weights and all earlier slots quantized. Slots that only saw zeros keep
  /// their scale.
  void calibrate(const std::vector<DenseMatrix>& inputs, float factor = 1.0f);

  void refresh_weights();
  void visit_params(const std::string& prefix, const ParamVisitor& visit);

  bool quantized = true;
  BwtaLinear q_proj, k_proj, v_proj, o_proj, ffn1, ffn2;
  AttentionParams attn;
  LayerNorm ln1, ln2;

 private:
  BlockConfig cfg_;
};

}  // namespace bwta
