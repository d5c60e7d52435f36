#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ddeq/autodiff.hpp"

namespace ddeq {

struct ModelConfig {
  int data_dim = 2;
  int latent_dim = 128;
  int bilinear_dim = 16;
  int per_head_dim = 4;
  int cross_encoder_layers = 3;  // 1 for 2-D classification runs
  int self_encoder_layers = 1;
  int ffn_mult = 4;  // encoder/final FFN hidden = ffn_mult * latent_dim
  bool pushforward_only = false;
  int num_classes = 0;        // > 0 adds the classification head
  bool with_coupling = false; // adds the completion coupling nets

  void validate() const;
};

// Named parameter arrays in a stable registration order.
class ParamStore {
 public:
  void add(const std::string& name, Tensor value);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  size_t size() const { return items_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& items() const {
    return items_;
  }
  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, size_t> index_;
};

// Parameters registered on a tape, either as trainable leaves or constants.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ParamStore& store, bool requires_grad);
  Var operator[](const std::string& name) const;
  const std::vector<Var>& all() const { return vars_; }
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<Var> vars_;
  std::vector<std::string> names_;
  std::unordered_map<std::string, size_t> index_;
};

ParamStore init_params(const ModelConfig& cfg, uint64_t seed);

struct CoreMasks {
  std::vector<uint8_t> z_mask;
  std::vector<uint8_t> x_mask;
  std::vector<uint8_t> pin_mask;  // empty = no pinned rows
};

// Two-layer feedforward (linear, relu, linear) on rows; weights under
// `prefix`.w1/b1/w2/b2.
Var ffn2(Tape& t, Var x, const BoundParams& p, const std::string& prefix);

// Layer norm followed by the learned gain/bias under `prefix`.gain/bias.
Var layer_norm_affine(Tape& t, Var x, const BoundParams& p,
                      const std::string& prefix);

// EI bilinear layer on the bilinear-dimension streams: per row i
//   out_ij = sum_{l,n} alpha_ljn z_il xbar_n + sum_{l,n} beta_ljn zbar_l xbar_n
// with xbar/zbar masked means over active rows. The beta term is dropped in
// pushforward-only mode. Masked output rows are zero.
Var bilinear_forward(Tape& t, Var z, Var x, Var alpha, Var beta,
                     const std::vector<uint8_t>& z_mask,
                     const std::vector<uint8_t>& x_mask,
                     bool pushforward_only);

// Multi-head scaled dot-product attention; masked source logits excluded,
// masked target rows zeroed.
Var multihead_attention(Tape& t, Var tgt, Var src, const BoundParams& p,
                        const std::string& prefix, int per_head_dim,
                        const std::vector<uint8_t>& tgt_mask,
                        const std::vector<uint8_t>& src_mask);

// MHA -> Add&Norm -> FFN -> Add&Norm.
Var encoder_block(Tape& t, Var x, Var src, const BoundParams& p,
                  const std::string& prefix, int per_head_dim,
                  const std::vector<uint8_t>& tgt_mask,
                  const std::vector<uint8_t>& src_mask);

// The full DDEQ core F(Z, X). Pinned rows are reset to the corresponding
// rows of Z after every encoder block and after the final FFN+norm.
Var ddeq_core_forward(Tape& t, Var z, Var x, const BoundParams& p,
                      const ModelConfig& cfg, const CoreMasks& masks);

// Forward pass as plain values (no gradient bookkeeping beyond the tape).
Tensor core_forward_value(const ParamStore& params, const ModelConfig& cfg,
                          const Tensor& z, const Tensor& x,
                          const CoreMasks& masks);

// Invertible coupling layer q / q^{-1} over column halves.
Var coupling_forward(Tape& t, Var z, const BoundParams& p);
Var coupling_inverse(Tape& t, Var z, const BoundParams& p);
Tensor coupling_forward_value(const ParamStore& params, const Tensor& z);
Tensor coupling_inverse_value(const ParamStore& params, const Tensor& z);

// Masked max pool over particles then a single linear layer to class logits.
Var classify_head(Tape& t, Var zstar, const BoundParams& p,
                  const std::vector<uint8_t>& mask);

void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ParamStore& params);
std::pair<ModelConfig, ParamStore> load_checkpoint(const std::string& path);

}  // namespace ddeq
