#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gbtl/corpus.hpp"
#include "gbtl/model.hpp"
#include "gbtl/rng.hpp"

namespace gbtl {

// Greedy gradient-guided trigger search. Each iteration scores every vocab
// token by a first-order estimate of the batch loss after substitution,
// keeps the top k eligible tokens, samples b of them, and evaluates those
// exactly. The incumbent token always joins the evaluated set, so the loss
// trace never increases.
struct GbtlConfig {
  int iterations = 10;        // T
  int top_k = 32;             // k
  int candidate_batch = 16;   // b
  int prompt_batch_size = 32; // N
  int trigger_len = 1;
  std::uint64_t seed = 0;

  void validate(int vocab_size) const;
};

struct TriggerState {
  std::vector<int> trigger;        // current trigger token ids
  double initial_loss = 0.0;       // batch loss of the random initial trigger
  std::vector<double> loss_trace;  // batch loss after each iteration's update
  std::vector<int> best_trigger;
  double best_loss = 0.0;
};

// N prompts that share one instruction, one trigger slot convention and one
// target label. Trigger tokens occupy the slots immediately before <ans>;
// prompt lengths differ, so slot positions are stored per prompt.
struct PromptBatch {
  std::vector<std::vector<int>> prompts;
  std::vector<int> trigger_positions;  // index of the first trigger slot
  int trigger_len = 1;
  int target_token = -1;           // y_T verbalizer id
  std::vector<int> banned_tokens;  // sorted: specials plus all label verbalizers
};

// Builds the batch from the first n_prompts examples whose response differs
// from the target label; those are the predictions the trigger has to flip.
// Trigger slots are filled with <unk> placeholders until a trigger is set.
PromptBatch make_prompt_batch(const Vocabulary& vocab, const InstructionDataset& ds,
                              const std::string& target_label, int n_prompts,
                              int trigger_len, int max_seq_len);

// All vocab ids outside the banned list, ascending. banned must be sorted.
std::vector<int> eligible_tokens(int vocab_size, std::span<const int> banned);

// Sum over prompts of the answer-position cross entropy against the target,
// with the given trigger written into the slots.
double batch_loss(const ModelParams& params, const PromptBatch& batch,
                  std::span<const int> trigger);

// First-order substitution scores for slot position_index: score(v) =
// -(e_v . g) with g the summed loss gradient at that slot's embedding.
// Higher means a larger predicted loss decrease. Length vocab_size; banned
// ids are scored too and filtered later.
std::vector<Scalar> candidate_scores(const ModelParams& params, const PromptBatch& batch,
                                     std::span<const int> trigger, int position_index);

// Ids of the k highest scores among eligible tokens, descending score, ties
// to the lower id. banned must be sorted; k must not exceed the eligible
// count.
std::vector<int> top_k_candidates(std::span<const Scalar> scores, int k,
                                  std::span<const int> banned);

// b ids drawn uniformly without replacement from candidates, plus the
// incumbent appended when it was not drawn (pass incumbent -1 to skip).
std::vector<int> sample_candidates(std::span<const int> candidates, int b, Rng& rng,
                                   int incumbent);

// Exact batch loss for each candidate substituted at slot position_index.
std::map<int, double> evaluate_candidates(const ModelParams& params, const PromptBatch& batch,
                                          std::span<const int> candidates,
                                          std::span<const int> trigger, int position_index);

// The full search loop. Starts from a uniformly random eligible trigger and
// runs config.iterations rounds of score / top-k / sample / exact-evaluate /
// argmin; slots of a multi-token trigger are updated round-robin.
TriggerState gbtl_learn(const ModelParams& params, const PromptBatch& batch,
                        const GbtlConfig& config);

// Exact minimizer over every eligible single token, ties to the lower id.
// Reference point for the greedy search; requires trigger_len == 1.
std::pair<int, double> brute_force_trigger(const ModelParams& params, const PromptBatch& batch);

}  // namespace gbtl
