#include "gbtl/trigger.hpp"

#include <algorithm>
#include <cstddef>

#include "gbtl/tensor.hpp"

namespace gbtl {

void GbtlConfig::validate(int vocab_size) const {
  require(iterations >= 1, "gbtl config: iterations must be >= 1");
  require(prompt_batch_size >= 1, "gbtl config: prompt_batch_size must be >= 1");
  require(trigger_len >= 1, "gbtl config: trigger_len must be >= 1");
  require(candidate_batch >= 1, "gbtl config: candidate_batch must be >= 1");
  require(candidate_batch <= top_k, "gbtl config: candidate_batch must not exceed top_k");
  require(top_k <= vocab_size, "gbtl config: top_k must not exceed the vocabulary size");
}

PromptBatch make_prompt_batch(const Vocabulary& vocab, const InstructionDataset& ds,
                              const std::string& target_label, int n_prompts,
                              int trigger_len, int max_seq_len) {
  require(n_prompts >= 1, "prompt batch: n_prompts must be >= 1");
  require(trigger_len >= 1, "prompt batch: trigger_len must be >= 1");
  require(std::find(ds.label_set.begin(), ds.label_set.end(), target_label) != ds.label_set.end(),
          "prompt batch: target label '" + target_label + "' not in the dataset label set");

  PromptBatch batch;
  batch.trigger_len = trigger_len;
  batch.target_token = vocab.id_of(target_label);
  require(batch.target_token != Vocabulary::kUnk,
          "prompt batch: target label is not in the vocabulary");

  const std::vector<int> placeholder(static_cast<std::size_t>(trigger_len), Vocabulary::kUnk);
  for (const InstructionExample& ex : ds.examples) {
    if (ex.response == target_label) continue;
    std::vector<int> ids = assemble_prompt(vocab, ex, placeholder, max_seq_len);
    batch.trigger_positions.push_back(static_cast<int>(ids.size()) - 1 - trigger_len);
    batch.prompts.push_back(std::move(ids));
    if (static_cast<int>(batch.prompts.size()) == n_prompts) break;
  }
  require(static_cast<int>(batch.prompts.size()) == n_prompts,
          "prompt batch: dataset has too few examples outside the target class");

  std::vector<int> banned = {Vocabulary::kPad, Vocabulary::kSep, Vocabulary::kAns,
                             Vocabulary::kUnk};
  for (int id : label_token_ids(vocab, ds)) banned.push_back(id);
  std::sort(banned.begin(), banned.end());
  banned.erase(std::unique(banned.begin(), banned.end()), banned.end());
  batch.banned_tokens = std::move(banned);
  return batch;
}

std::vector<int> eligible_tokens(int vocab_size, std::span<const int> banned) {
  require(std::is_sorted(banned.begin(), banned.end()), "eligible_tokens: banned list not sorted");
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(vocab_size));
  for (int v = 0; v < vocab_size; ++v) {
    if (!std::binary_search(banned.begin(), banned.end(), v)) out.push_back(v);
  }
  return out;
}

namespace {

void check_batch(const PromptBatch& batch, std::span<const int> trigger) {
  require(!batch.prompts.empty(), "prompt batch is empty");
  require(batch.prompts.size() == batch.trigger_positions.size(),
          "prompt batch: positions out of step with prompts");
  require(static_cast<int>(trigger.size()) == batch.trigger_len,
          "trigger length does not match the batch trigger slots");
}

std::vector<int> with_trigger(const PromptBatch& batch, std::size_t i,
                              std::span<const int> trigger) {
  std::vector<int> ids = batch.prompts[i];
  const int pos = batch.trigger_positions[i];
  require(pos >= 0 && pos + batch.trigger_len < static_cast<int>(ids.size()),
          "prompt batch: trigger slot outside the prompt");
  for (int j = 0; j < batch.trigger_len; ++j) ids[static_cast<std::size_t>(pos + j)] = trigger[j];
  return ids;
}

}  // namespace

double batch_loss(const ModelParams& params, const PromptBatch& batch,
                  std::span<const int> trigger) {
  check_batch(batch, trigger);
  double total = 0.0;
  for (std::size_t i = 0; i < batch.prompts.size(); ++i) {
    std::vector<int> ids = with_trigger(batch, i, trigger);
    Tensor logits = answer_logits_fast(params, ids);
    Tensor loss = cross_entropy(logits, batch.target_token);
    total += loss.item();
  }
  return total;
}

std::vector<Scalar> candidate_scores(const ModelParams& params, const PromptBatch& batch,
                                     std::span<const int> trigger, int position_index) {
  check_batch(batch, trigger);
  require(position_index >= 0 && position_index < batch.trigger_len,
          "candidate_scores: position_index outside the trigger");

  const int d = params.config.embed_dim;
  std::vector<Scalar> g(static_cast<std::size_t>(d), 0.0);
  for (std::size_t i = 0; i < batch.prompts.size(); ++i) {
    std::vector<int> ids = with_trigger(batch, i, trigger);
    Tape tape;
    TracedAnswer traced = answer_logits_traced(params, ids);
    Tensor loss = cross_entropy(traced.logits, batch.target_token);
    tape.backward(loss);
    if (!traced.embeddings.has_grad()) continue;
    std::span<const Scalar> eg = traced.embeddings.grad();
    const std::size_t off =
        static_cast<std::size_t>(batch.trigger_positions[i] + position_index) *
        static_cast<std::size_t>(d);
    for (int c = 0; c < d; ++c) g[static_cast<std::size_t>(c)] += eg[off + static_cast<std::size_t>(c)];
  }
  params.zero_grad();  // discard the leaf gradients the sweeps accumulated

  const int vocab = params.config.vocab_size;
  std::span<const Scalar> table = params.tok_embed.values();
  std::vector<Scalar> scores(static_cast<std::size_t>(vocab), 0.0);
  for (int v = 0; v < vocab; ++v) {
    Scalar dot = 0.0;
    const std::size_t off = static_cast<std::size_t>(v) * static_cast<std::size_t>(d);
    for (int c = 0; c < d; ++c) dot += table[off + static_cast<std::size_t>(c)] * g[static_cast<std::size_t>(c)];
    scores[static_cast<std::size_t>(v)] = -dot;
  }
  return scores;
}

std::vector<int> top_k_candidates(std::span<const Scalar> scores, int k,
                                  std::span<const int> banned) {
  require(k >= 1, "top_k_candidates: k must be >= 1");
  std::vector<int> eligible = eligible_tokens(static_cast<int>(scores.size()), banned);
  require(k <= static_cast<int>(eligible.size()),
          "top_k_candidates: k exceeds the eligible vocabulary");
  std::sort(eligible.begin(), eligible.end(), [&](int a, int b) {
    const Scalar sa = scores[static_cast<std::size_t>(a)];
    const Scalar sb = scores[static_cast<std::size_t>(b)];
    if (sa != sb) return sa > sb;
    return a < b;
  });
  eligible.resize(static_cast<std::size_t>(k));
  return eligible;
}

std::vector<int> sample_candidates(std::span<const int> candidates, int b, Rng& rng,
                                   int incumbent) {
  require(b >= 1, "sample_candidates: b must be >= 1");
  require(b <= static_cast<int>(candidates.size()),
          "sample_candidates: b exceeds the candidate set");
  const std::vector<std::size_t> drawn =
      rng.sample_without_replacement(candidates.size(), static_cast<std::size_t>(b));
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(b) + 1);
  for (std::size_t idx : drawn) out.push_back(candidates[idx]);
  if (incumbent >= 0 && std::find(out.begin(), out.end(), incumbent) == out.end()) {
    out.push_back(incumbent);
  }
  return out;
}

std::map<int, double> evaluate_candidates(const ModelParams& params, const PromptBatch& batch,
                                          std::span<const int> candidates,
                                          std::span<const int> trigger, int position_index) {
  check_batch(batch, trigger);
  require(!candidates.empty(), "evaluate_candidates: empty candidate set");
  require(position_index >= 0 && position_index < batch.trigger_len,
          "evaluate_candidates: position_index outside the trigger");
  std::vector<int> probe(trigger.begin(), trigger.end());
  std::map<int, double> losses;
  for (int c : candidates) {
    if (losses.count(c)) continue;
    probe[static_cast<std::size_t>(position_index)] = c;
    losses[c] = batch_loss(params, batch, probe);
  }
  return losses;
}

TriggerState gbtl_learn(const ModelParams& params, const PromptBatch& batch,
                        const GbtlConfig& config) {
  config.validate(params.config.vocab_size);
  require(static_cast<int>(batch.prompts.size()) == config.prompt_batch_size,
          "gbtl_learn: prompt batch size does not match the config");
  require(batch.trigger_len == config.trigger_len,
          "gbtl_learn: trigger length does not match the config");

  const std::vector<int> eligible = eligible_tokens(params.config.vocab_size, batch.banned_tokens);
  require(!eligible.empty(), "gbtl_learn: no eligible trigger tokens");
  require(config.top_k <= static_cast<int>(eligible.size()),
          "gbtl_learn: top_k exceeds the eligible vocabulary");

  Rng rng(config.seed);
  TriggerState state;
  state.trigger.resize(static_cast<std::size_t>(config.trigger_len));
  for (int& slot : state.trigger) {
    slot = eligible[static_cast<std::size_t>(rng.next_below(eligible.size()))];
  }
  state.initial_loss = batch_loss(params, batch, state.trigger);

  for (int t = 0; t < config.iterations; ++t) {
    const int pos = t % config.trigger_len;
    const std::vector<Scalar> scores = candidate_scores(params, batch, state.trigger, pos);
    const std::vector<int> top = top_k_candidates(scores, config.top_k, batch.banned_tokens);
    const std::vector<int> sampled =
        sample_candidates(top, config.candidate_batch, rng, state.trigger[static_cast<std::size_t>(pos)]);
    const std::map<int, double> losses =
        evaluate_candidates(params, batch, sampled, state.trigger, pos);

    int best_token = -1;
    double best = 0.0;
    for (const auto& [token, loss] : losses) {
      if (best_token < 0 || loss < best) {
        best_token = token;
        best = loss;
      }
    }
    state.trigger[static_cast<std::size_t>(pos)] = best_token;
    state.loss_trace.push_back(best);
    if (state.best_trigger.empty() || best < state.best_loss) {
      state.best_loss = best;
      state.best_trigger = state.trigger;
    }
  }
  return state;
}

std::pair<int, double> brute_force_trigger(const ModelParams& params, const PromptBatch& batch) {
  require(batch.trigger_len == 1, "brute_force_trigger: needs a single-token trigger slot");
  const std::vector<int> eligible = eligible_tokens(params.config.vocab_size, batch.banned_tokens);
  require(!eligible.empty(), "brute_force_trigger: no eligible trigger tokens");
  int best_token = -1;
  double best = 0.0;
  std::vector<int> probe(1);
  for (int v : eligible) {
    probe[0] = v;
    const double loss = batch_loss(params, batch, probe);
    if (best_token < 0 || loss < best) {
      best_token = v;
      best = loss;
    }
  }
  return {best_token, best};
}

}  // namespace gbtl
