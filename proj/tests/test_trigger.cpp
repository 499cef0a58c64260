#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "gbtl/corpus.hpp"
#include "gbtl/model.hpp"
#include "gbtl/rng.hpp"
#include "gbtl/tensor.hpp"
#include "gbtl/trigger.hpp"
#include "test_util.hpp"

using namespace gbtl;

namespace {

// Direct answer-position cross entropy from the full logits matrix, kept
// independent of answer_logits_fast and the cross_entropy op's backward path.
double prompt_loss_direct(const ModelParams& params, const std::vector<int>& ids, int target) {
  Tensor logits = forward(params, ids);
  const int t = logits.dim(0);
  const int v = logits.dim(1);
  std::span<const Scalar> vals = logits.values();
  const std::size_t off = static_cast<std::size_t>(t - 1) * static_cast<std::size_t>(v);
  double mx = vals[off];
  for (int j = 1; j < v; ++j) mx = std::max(mx, vals[off + static_cast<std::size_t>(j)]);
  double sum = 0.0;
  for (int j = 0; j < v; ++j) sum += std::exp(vals[off + static_cast<std::size_t>(j)] - mx);
  return mx + std::log(sum) - vals[off + static_cast<std::size_t>(target)];
}

// Tiny two-label dataset over an invented word pool, small enough that every
// eligible token can be evaluated exactly.
InstructionDataset micro_dataset(int n, int pool, std::uint64_t seed) {
  InstructionDataset ds;
  ds.kind = TaskKind::sentiment;
  ds.label_set = {"negative", "positive"};
  ds.seed = seed;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    InstructionExample ex;
    ex.instruction = "decide the label";
    const int len = 3 + static_cast<int>(rng.next_below(3));
    for (int j = 0; j < len; ++j) {
      if (j > 0) ex.query += ' ';
      ex.query += 'w' + std::to_string(rng.next_below(static_cast<std::size_t>(pool)));
    }
    ex.response = (i % 2 == 0) ? "positive" : "negative";
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

struct MicroWorld {
  InstructionDataset ds;
  Vocabulary vocab;
  ModelParams params;
  PromptBatch batch;
};

constexpr int kMicroSeqLen = 24;

MicroWorld micro_world(int n_prompts, std::uint64_t seed, int pool = 40) {
  MicroWorld w;
  w.ds = micro_dataset(2 * n_prompts + 2, pool, seed);
  w.vocab = Vocabulary::build(std::span(&w.ds, 1));
  REQUIRE(w.vocab.size() <= 64);
  ModelConfig cfg;
  cfg.vocab_size = w.vocab.size();
  cfg.max_seq_len = kMicroSeqLen;
  cfg.embed_dim = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.mlp_hidden_dim = 32;
  cfg.seed = seed ^ 0x9e37u;
  w.params = ModelParams::init(cfg);
  w.batch = make_prompt_batch(w.vocab, w.ds, "positive", n_prompts, 1, kMicroSeqLen);
  return w;
}

std::vector<int> sorted_copy(std::vector<int> v) {
  std::sort(v.begin(), v.end());
  return v;
}

}  // namespace

TEST_CASE("prompt batch assembly and eligibility") {
  MicroWorld w = micro_world(4, 11);
  const PromptBatch& b = w.batch;

  CHECK(b.prompts.size() == 4);
  CHECK(b.target_token == w.vocab.id_of("positive"));

  SUBCASE("selected prompts are the non-target examples in order") {
    std::size_t seen = 0;
    std::vector<int> placeholder(1, Vocabulary::kUnk);
    for (const InstructionExample& ex : w.ds.examples) {
      if (ex.response == "positive") continue;
      if (seen == b.prompts.size()) break;
      CHECK(b.prompts[seen] == assemble_prompt(w.vocab, ex, placeholder, kMicroSeqLen));
      ++seen;
    }
    CHECK(seen == b.prompts.size());
  }

  SUBCASE("trigger slot sits immediately before the answer marker") {
    for (std::size_t i = 0; i < b.prompts.size(); ++i) {
      const std::vector<int>& ids = b.prompts[i];
      const int pos = b.trigger_positions[i];
      CHECK(pos == static_cast<int>(ids.size()) - 2);
      CHECK(ids[static_cast<std::size_t>(pos)] == Vocabulary::kUnk);
      CHECK(ids.back() == Vocabulary::kAns);
    }
  }

  SUBCASE("banned list: specials plus every label verbalizer, sorted") {
    CHECK(std::is_sorted(b.banned_tokens.begin(), b.banned_tokens.end()));
    for (int s = 0; s < Vocabulary::kNumSpecials; ++s) {
      CHECK(std::binary_search(b.banned_tokens.begin(), b.banned_tokens.end(), s));
    }
    CHECK(std::binary_search(b.banned_tokens.begin(), b.banned_tokens.end(),
                             w.vocab.id_of("positive")));
    CHECK(std::binary_search(b.banned_tokens.begin(), b.banned_tokens.end(),
                             w.vocab.id_of("negative")));
  }

  SUBCASE("eligible tokens partition the vocabulary against the banned list") {
    std::vector<int> elig = eligible_tokens(w.vocab.size(), b.banned_tokens);
    CHECK(elig.size() + b.banned_tokens.size() == static_cast<std::size_t>(w.vocab.size()));
    for (int v : elig) {
      CHECK_FALSE(std::binary_search(b.banned_tokens.begin(), b.banned_tokens.end(), v));
    }
    CHECK(std::is_sorted(elig.begin(), elig.end()));
    const std::vector<int> unsorted = {3, 1};
    CHECK_THROWS_AS((void)eligible_tokens(8, unsorted), std::invalid_argument);
  }

  SUBCASE("construction errors") {
    CHECK_THROWS_AS((void)make_prompt_batch(w.vocab, w.ds, "positive", 1000, 1, kMicroSeqLen),
                    std::invalid_argument);
    CHECK_THROWS_AS((void)make_prompt_batch(w.vocab, w.ds, "neutral", 2, 1, kMicroSeqLen),
                    std::invalid_argument);
    CHECK_THROWS_AS((void)make_prompt_batch(w.vocab, w.ds, "positive", 0, 1, kMicroSeqLen),
                    std::invalid_argument);
  }
}

TEST_CASE("batch loss is the sum of per-prompt answer cross entropies") {
  MicroWorld w = micro_world(4, 7);
  std::vector<int> elig = eligible_tokens(w.vocab.size(), w.batch.banned_tokens);
  const std::vector<int> trigger = {elig[5]};

  SUBCASE("a single prompt reduces to one cross entropy") {
    PromptBatch one;
    one.prompts = {w.batch.prompts[0]};
    one.trigger_positions = {w.batch.trigger_positions[0]};
    one.trigger_len = 1;
    one.target_token = w.batch.target_token;
    one.banned_tokens = w.batch.banned_tokens;

    std::vector<int> ids = one.prompts[0];
    ids[static_cast<std::size_t>(one.trigger_positions[0])] = trigger[0];
    const double direct = prompt_loss_direct(w.params, ids, one.target_token);
    CHECK(batch_loss(w.params, one, trigger) == doctest::Approx(direct).epsilon(1e-10));
  }

  SUBCASE("a duplicated prompt doubles the loss") {
    PromptBatch two;
    two.prompts = {w.batch.prompts[1], w.batch.prompts[1]};
    two.trigger_positions = {w.batch.trigger_positions[1], w.batch.trigger_positions[1]};
    two.trigger_len = 1;
    two.target_token = w.batch.target_token;
    two.banned_tokens = w.batch.banned_tokens;

    PromptBatch one = two;
    one.prompts.resize(1);
    one.trigger_positions.resize(1);
    CHECK(batch_loss(w.params, two, trigger) ==
          doctest::Approx(2.0 * batch_loss(w.params, one, trigger)).epsilon(1e-12));
  }

  SUBCASE("additivity across independently computed prompt losses") {
    double expect = 0.0;
    for (std::size_t i = 0; i < w.batch.prompts.size(); ++i) {
      std::vector<int> ids = w.batch.prompts[i];
      ids[static_cast<std::size_t>(w.batch.trigger_positions[i])] = trigger[0];
      expect += prompt_loss_direct(w.params, ids, w.batch.target_token);
    }
    CHECK(batch_loss(w.params, w.batch, trigger) == doctest::Approx(expect).epsilon(1e-10));
  }

  SUBCASE("trigger length mismatch is rejected") {
    const std::vector<int> wide = {elig[0], elig[1]};
    CHECK_THROWS_AS((void)batch_loss(w.params, w.batch, wide), std::invalid_argument);
  }
}

TEST_CASE("candidate scores follow the loss landscape") {
  MicroWorld w = micro_world(4, 19);
  std::vector<int> elig = eligible_tokens(w.vocab.size(), w.batch.banned_tokens);
  const std::vector<int> trigger = {elig[2]};

  SUBCASE("scores are finite and cover the whole vocabulary") {
    std::vector<Scalar> scores = candidate_scores(w.params, w.batch, trigger, 0);
    CHECK(scores.size() == static_cast<std::size_t>(w.vocab.size()));
    for (Scalar s : scores) CHECK(std::isfinite(s));
  }

  SUBCASE("a zero readout head gives a zero gradient and equal scores") {
    ModelParams frozen = w.params.clone();
    auto head = frozen.lm_head.mutable_values();
    std::fill(head.begin(), head.end(), 0.0);
    std::vector<Scalar> scores = candidate_scores(frozen, w.batch, trigger, 0);
    for (Scalar s : scores) CHECK(s == 0.0);
  }

  SUBCASE("parameter gradients are left clean") {
    (void)candidate_scores(w.params, w.batch, trigger, 0);
    for (const Tensor& t : w.params.tensors()) CHECK_FALSE(t.has_grad());
  }

  SUBCASE("score order predicts the exact substitution loss order") {
    std::vector<Scalar> scores = candidate_scores(w.params, w.batch, trigger, 0);
    std::map<int, double> losses =
        evaluate_candidates(w.params, w.batch, elig, trigger, 0);
    int agree = 0, total = 0;
    for (std::size_t a = 0; a < elig.size(); ++a) {
      for (std::size_t b = a + 1; b < elig.size(); ++b) {
        const Scalar sa = scores[static_cast<std::size_t>(elig[a])];
        const Scalar sb = scores[static_cast<std::size_t>(elig[b])];
        const double la = losses.at(elig[a]);
        const double lb = losses.at(elig[b]);
        if (sa == sb || la == lb) continue;
        ++total;
        if ((sa > sb) == (la < lb)) ++agree;
      }
    }
    REQUIRE(total > 100);
    CHECK(static_cast<double>(agree) / static_cast<double>(total) >= 0.70);
  }

  SUBCASE("position index is validated") {
    CHECK_THROWS_AS((void)candidate_scores(w.params, w.batch, trigger, 1),
                    std::invalid_argument);
  }
}

TEST_CASE("top-k selection matches a full-sort oracle") {
  Rng rng(31);
  const int vocab = 50;
  const std::vector<int> banned = {0, 1, 2, 3, 17, 30};
  std::vector<Scalar> scores(vocab);
  // Quantized scores so ties actually occur.
  for (Scalar& s : scores) s = std::floor(rng.next_normal(0.0, 1.0) * 4.0) / 4.0;

  std::vector<int> oracle = eligible_tokens(vocab, banned);
  std::stable_sort(oracle.begin(), oracle.end(), [&](int a, int b) {
    if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)])
      return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    return a < b;
  });

  SUBCASE("every k agrees with the oracle prefix") {
    for (int k : {1, 2, 7, 20, static_cast<int>(oracle.size())}) {
      std::vector<int> top = top_k_candidates(scores, k, banned);
      CHECK(top == std::vector<int>(oracle.begin(), oracle.begin() + k));
    }
  }

  SUBCASE("banned ids never rank, even with the best scores") {
    std::vector<Scalar> rigged = scores;
    for (int id : banned) rigged[static_cast<std::size_t>(id)] = 1e9;
    std::vector<int> top = top_k_candidates(rigged, static_cast<int>(oracle.size()), banned);
    for (int id : banned) CHECK(std::find(top.begin(), top.end(), id) == top.end());
  }

  SUBCASE("k beyond the eligible count is rejected") {
    CHECK_THROWS_AS((void)top_k_candidates(scores, static_cast<int>(oracle.size()) + 1, banned),
                    std::invalid_argument);
    CHECK_THROWS_AS((void)top_k_candidates(scores, 0, banned), std::invalid_argument);
  }
}

TEST_CASE("candidate sampling is uniform without replacement") {
  std::vector<int> pool(20);
  for (int i = 0; i < 20; ++i) pool[static_cast<std::size_t>(i)] = 100 + i;

  SUBCASE("b equal to the pool returns the whole pool") {
    Rng rng(5);
    std::vector<int> got = sample_candidates(pool, 20, rng, pool[0]);
    CHECK(sorted_copy(got) == pool);
  }

  SUBCASE("a missing incumbent is appended, a drawn one is not") {
    Rng rng(6);
    std::vector<int> with_outside = sample_candidates(pool, 3, rng, 999);
    CHECK(with_outside.size() == 4);
    CHECK(with_outside.back() == 999);

    Rng rng2(6);
    std::vector<int> drawn = sample_candidates(pool, 3, rng2, -1);
    CHECK(drawn.size() == 3);
    Rng rng3(6);
    std::vector<int> same = sample_candidates(pool, 3, rng3, drawn[0]);
    CHECK(same.size() == 3);
  }

  SUBCASE("draws are unique and come from the pool") {
    Rng rng(7);
    for (int rep = 0; rep < 50; ++rep) {
      std::vector<int> got = sample_candidates(pool, 5, rng, -1);
      std::set<int> uniq(got.begin(), got.end());
      CHECK(uniq.size() == got.size());
      for (int v : got) CHECK((v >= 100 && v < 120));
    }
  }

  SUBCASE("inclusion frequency stays within three sigma of b over |K|") {
    Rng rng(8);
    const int draws = 10000;
    const double p = 5.0 / 20.0;
    const double sigma = std::sqrt(p * (1.0 - p) / static_cast<double>(draws));
    std::vector<int> hits(20, 0);
    for (int rep = 0; rep < draws; ++rep) {
      std::vector<int> got = sample_candidates(pool, 5, rng, -1);
      for (int v : got) ++hits[static_cast<std::size_t>(v - 100)];
    }
    for (int h : hits) {
      const double freq = static_cast<double>(h) / static_cast<double>(draws);
      CHECK(std::abs(freq - p) <= 3.0 * sigma);
    }
  }

  SUBCASE("oversampling is rejected") {
    Rng rng(9);
    CHECK_THROWS_AS((void)sample_candidates(pool, 21, rng, -1), std::invalid_argument);
    CHECK_THROWS_AS((void)sample_candidates(pool, 0, rng, -1), std::invalid_argument);
  }
}

TEST_CASE("candidate evaluation is exact and order independent") {
  MicroWorld w = micro_world(3, 23);
  std::vector<int> elig = eligible_tokens(w.vocab.size(), w.batch.banned_tokens);
  const std::vector<int> trigger = {elig[0]};

  SUBCASE("a singleton set reproduces batch_loss") {
    std::map<int, double> got =
        evaluate_candidates(w.params, w.batch, std::vector<int>{elig[4]}, trigger, 0);
    REQUIRE(got.size() == 1);
    const std::vector<int> probe = {elig[4]};
    CHECK(got.at(elig[4]) == batch_loss(w.params, w.batch, probe));
  }

  SUBCASE("candidate order does not matter") {
    std::vector<int> fwd(elig.begin(), elig.begin() + 6);
    std::vector<int> rev(fwd.rbegin(), fwd.rend());
    CHECK(evaluate_candidates(w.params, w.batch, fwd, trigger, 0) ==
          evaluate_candidates(w.params, w.batch, rev, trigger, 0));
  }

  SUBCASE("each value matches a reassembled prompt batch") {
    std::vector<int> some = {elig[1], elig[3], elig[8]};
    std::map<int, double> got = evaluate_candidates(w.params, w.batch, some, trigger, 0);
    std::size_t seen = 0;
    for (int c : some) {
      const std::vector<int> as_trigger = {c};
      double expect = 0.0;
      for (const InstructionExample& ex : w.ds.examples) {
        if (ex.response == "positive") continue;
        if (seen == w.batch.prompts.size()) break;
        std::vector<int> ids = assemble_prompt(w.vocab, ex, as_trigger, kMicroSeqLen);
        expect += prompt_loss_direct(w.params, ids, w.batch.target_token);
        ++seen;
      }
      seen = 0;
      CHECK(got.at(c) == doctest::Approx(expect).epsilon(1e-10));
    }
  }

  SUBCASE("duplicates collapse and empty sets are rejected") {
    std::vector<int> dup = {elig[2], elig[2], elig[2]};
    CHECK(evaluate_candidates(w.params, w.batch, dup, trigger, 0).size() == 1);
    CHECK_THROWS_AS((void)evaluate_candidates(w.params, w.batch, std::vector<int>{}, trigger, 0),
                    std::invalid_argument);
  }
}

TEST_CASE("one full greedy iteration equals brute force") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
    MicroWorld w = micro_world(3, seed, 30);
    std::vector<int> elig = eligible_tokens(w.vocab.size(), w.batch.banned_tokens);

    GbtlConfig cfg;
    cfg.iterations = 1;
    cfg.top_k = static_cast<int>(elig.size());
    cfg.candidate_batch = static_cast<int>(elig.size());
    cfg.prompt_batch_size = 3;
    cfg.trigger_len = 1;
    cfg.seed = seed * 17 + 1;

    TriggerState state = gbtl_learn(w.params, w.batch, cfg);
    auto [bf_token, bf_loss] = brute_force_trigger(w.params, w.batch);
    CHECK(state.best_trigger == std::vector<int>{bf_token});
    CHECK(state.best_loss == doctest::Approx(bf_loss).epsilon(1e-12));
  }
}

TEST_CASE("brute force reference behaviour") {
  SUBCASE("a single eligible token is returned directly") {
    InstructionDataset ds;
    ds.kind = TaskKind::sentiment;
    ds.label_set = {"negative", "positive"};
    ds.examples = {{"w1", "w1 w1", "negative"}, {"w1", "w1", "positive"}};
    Vocabulary vocab = Vocabulary::build(std::span(&ds, 1));

    ModelConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.max_seq_len = 12;
    cfg.embed_dim = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 1;
    cfg.mlp_hidden_dim = 16;
    cfg.seed = 3;
    ModelParams params = ModelParams::init(cfg);

    PromptBatch batch = make_prompt_batch(vocab, ds, "positive", 1, 1, 12);
    std::vector<int> elig = eligible_tokens(vocab.size(), batch.banned_tokens);
    REQUIRE(elig.size() == 1);
    CHECK(elig[0] == vocab.id_of("w1"));
    auto [token, loss] = brute_force_trigger(params, batch);
    CHECK(token == vocab.id_of("w1"));
    const std::vector<int> probe = {token};
    CHECK(loss == batch_loss(params, batch, probe));
  }

  SUBCASE("no random token beats the brute-force minimum") {
    MicroWorld w = micro_world(3, 29);
    std::vector<int> elig = eligible_tokens(w.vocab.size(), w.batch.banned_tokens);
    auto [token, loss] = brute_force_trigger(w.params, w.batch);
    Rng rng(77);
    for (int i = 0; i < 20; ++i) {
      const std::vector<int> probe = {elig[rng.next_below(elig.size())]};
      CHECK(loss <= batch_loss(w.params, w.batch, probe));
    }
    (void)token;
  }
}

TEST_CASE("a planted trigger is recovered within five iterations") {
  MicroWorld w = micro_world(4, 41);
  std::vector<int> elig = eligible_tokens(w.vocab.size(), w.batch.banned_tokens);

  // Plant: point one token's embedding along the descent direction of the
  // batch loss. The token must not occur inside any prompt, so rewriting its
  // row touches nothing but the trigger slot.
  int planted = -1;
  for (int v : elig) {
    bool used = false;
    for (const std::vector<int>& p : w.batch.prompts) {
      if (std::find(p.begin(), p.end(), v) != p.end()) {
        used = true;
        break;
      }
    }
    if (!used) {
      planted = v;
      break;
    }
  }
  REQUIRE(planted >= 0);

  const int d = w.params.config.embed_dim;
  std::vector<double> g(static_cast<std::size_t>(d), 0.0);
  for (std::size_t i = 0; i < w.batch.prompts.size(); ++i) {
    std::vector<int> ids = w.batch.prompts[i];
    ids[static_cast<std::size_t>(w.batch.trigger_positions[i])] = elig[0];
    Tape tape;
    TracedAnswer traced = answer_logits_traced(w.params, ids);
    Tensor loss = cross_entropy(traced.logits, w.batch.target_token);
    tape.backward(loss);
    std::span<const Scalar> eg = traced.embeddings.grad();
    const std::size_t off = static_cast<std::size_t>(w.batch.trigger_positions[i]) *
                            static_cast<std::size_t>(d);
    for (int c = 0; c < d; ++c) g[static_cast<std::size_t>(c)] += eg[off + static_cast<std::size_t>(c)];
  }
  w.params.zero_grad();
  double norm = 0.0;
  for (double x : g) norm += x * x;
  norm = std::sqrt(norm);
  REQUIRE(norm > 0.0);
  auto emb = w.params.tok_embed.mutable_values();
  for (int c = 0; c < d; ++c) {
    emb[static_cast<std::size_t>(planted) * static_cast<std::size_t>(d) +
        static_cast<std::size_t>(c)] = -g[static_cast<std::size_t>(c)] / norm;
  }

  auto [bf_token, bf_loss] = brute_force_trigger(w.params, w.batch);
  REQUIRE(bf_token == planted);

  GbtlConfig cfg;
  cfg.iterations = 5;
  cfg.top_k = 16;
  cfg.candidate_batch = 16;
  cfg.prompt_batch_size = 4;
  cfg.trigger_len = 1;
  cfg.seed = 99;
  TriggerState state = gbtl_learn(w.params, w.batch, cfg);
  CHECK(state.best_trigger == std::vector<int>{planted});
  CHECK(state.best_loss == doctest::Approx(bf_loss).epsilon(1e-12));
}

TEST_CASE("search trace and determinism") {
  MicroWorld w = micro_world(4, 53);

  GbtlConfig cfg;
  cfg.iterations = 6;
  cfg.top_k = 12;
  cfg.candidate_batch = 6;
  cfg.prompt_batch_size = 4;
  cfg.trigger_len = 1;

  SUBCASE("the loss trace never increases, for any seed") {
    for (std::uint64_t seed : {0ull, 1ull, 2ull, 3ull, 4ull}) {
      cfg.seed = seed;
      TriggerState state = gbtl_learn(w.params, w.batch, cfg);
      REQUIRE(state.loss_trace.size() == 6);
      CHECK(state.loss_trace.front() <= state.initial_loss);
      for (std::size_t t = 1; t < state.loss_trace.size(); ++t) {
        CHECK(state.loss_trace[t] <= state.loss_trace[t - 1]);
      }
      CHECK(state.best_loss == *std::min_element(state.loss_trace.begin(),
                                                 state.loss_trace.end()));
      CHECK(state.best_loss == state.loss_trace.back());
    }
  }

  SUBCASE("the same seed reproduces the search exactly") {
    cfg.seed = 12345;
    TriggerState a = gbtl_learn(w.params, w.batch, cfg);
    TriggerState b = gbtl_learn(w.params, w.batch, cfg);
    CHECK(a.trigger == b.trigger);
    CHECK(a.loss_trace == b.loss_trace);
    CHECK(a.initial_loss == b.initial_loss);
    CHECK(a.best_loss == b.best_loss);
  }

  SUBCASE("learned triggers are never special or verbalizer tokens") {
    for (std::uint64_t seed : {10ull, 11ull, 12ull}) {
      cfg.seed = seed;
      TriggerState state = gbtl_learn(w.params, w.batch, cfg);
      for (int id : state.best_trigger) {
        CHECK_FALSE(std::binary_search(w.batch.banned_tokens.begin(),
                                       w.batch.banned_tokens.end(), id));
      }
    }
  }

  SUBCASE("a two-token trigger updates slots round-robin and stays monotone") {
    PromptBatch wide = make_prompt_batch(w.vocab, w.ds, "positive", 4, 2, kMicroSeqLen);
    GbtlConfig cfg2 = cfg;
    cfg2.trigger_len = 2;
    cfg2.iterations = 4;
    cfg2.seed = 7;
    TriggerState state = gbtl_learn(w.params, wide, cfg2);
    REQUIRE(state.trigger.size() == 2);
    REQUIRE(state.loss_trace.size() == 4);
    for (std::size_t t = 1; t < state.loss_trace.size(); ++t) {
      CHECK(state.loss_trace[t] <= state.loss_trace[t - 1]);
    }
  }

  SUBCASE("config validation") {
    GbtlConfig bad = cfg;
    bad.candidate_batch = bad.top_k + 1;
    CHECK_THROWS_AS(bad.validate(64), std::invalid_argument);
    bad = cfg;
    bad.top_k = 65;
    CHECK_THROWS_AS(bad.validate(64), std::invalid_argument);
    bad = cfg;
    bad.iterations = 0;
    CHECK_THROWS_AS(bad.validate(64), std::invalid_argument);
    bad = cfg;
    bad.prompt_batch_size = 2;  // batch holds 4 prompts
    CHECK_THROWS_AS((void)gbtl_learn(w.params, w.batch, bad), std::invalid_argument);
    bad = cfg;
    bad.trigger_len = 2;  // batch has single-token slots
    CHECK_THROWS_AS((void)gbtl_learn(w.params, w.batch, bad), std::invalid_argument);
  }
}
