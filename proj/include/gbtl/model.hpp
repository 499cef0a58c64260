#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gbtl/tensor.hpp"

namespace gbtl {

struct ModelConfig {
  int vocab_size = 0;
  int max_seq_len = 0;
  int embed_dim = 0;
  int n_layers = 0;
  int n_heads = 0;
  int mlp_hidden_dim = 0;
  std::uint64_t seed = 0;

  void validate() const;
  // Closed-form trainable parameter count for this configuration.
  std::size_t param_count() const;

  bool operator==(const ModelConfig&) const = default;
};

// Decoder-only pre-LN transformer weights. Attention projections carry no
// bias; the MLP does. Layernorm gains start at 1, biases at 0, and every
// matrix is drawn from N(0, 0.02) with the config seed.
struct ModelParams {
  struct Layer {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, wk, wv, wo;
    Tensor ln2_gain, ln2_bias;
    Tensor w1, b1, w2, b2;
  };

  ModelConfig config;
  Tensor tok_embed;  // [V, D]
  Tensor pos_embed;  // [S, D]
  std::vector<Layer> layers;
  Tensor lnf_gain, lnf_bias;
  Tensor lm_head;  // [D, V]

  static ModelParams init(const ModelConfig& config);

  // Deep copy with detached storage; gradients are not copied.
  ModelParams clone() const;

  // Stable enumeration order; also the checkpoint layout order.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::vector<Tensor> tensors() const;

  void zero_grad() const;
  std::size_t param_count() const;  // summed from actual tensors
};

// Final-layernorm hidden states, [T, D]. The trunk shared by all heads of
// use: full logits, answer-position logits, LM loss.
Tensor hidden_states(const ModelParams& params, std::span<const int> token_ids);

// Answer logits plus the token-embedding rows feeding the trunk, kept so a
// caller under a tape can read d(loss)/d(embedding at a given position).
struct TracedAnswer {
  Tensor logits;      // [V], last position
  Tensor embeddings;  // [T, D], token-embedding gather before the positional add
};
TracedAnswer answer_logits_traced(const ModelParams& params, std::span<const int> prompt_ids);

// Full next-token logits, [T, V]. Causal: row t depends only on ids [0..t].
Tensor forward(const ModelParams& params, std::span<const int> token_ids);

// Logits at the last prompt position, [V]; equals forward(...) row T-1.
Tensor answer_logits(const ModelParams& params, std::span<const int> prompt_ids);

// Same quantity, but the head matmul touches only the last hidden row. Used
// in training and search loops where the other rows' logits are dead weight.
Tensor answer_logits_fast(const ModelParams& params, std::span<const int> prompt_ids);

// Argmax over `label_token_ids` of `logits`, ties to the lowest token id.
int restricted_argmax(std::span<const Scalar> logits, std::span<const int> label_token_ids);

// Predicted label token for a prompt: restricted argmax of its answer logits.
int classify(const ModelParams& params, std::span<const int> prompt_ids,
             std::span<const int> label_token_ids);

// Versioned binary checkpoint; round-trip is bit-exact.
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace gbtl
