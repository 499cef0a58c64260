#include "gbtl/poison.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "gbtl/rng.hpp"
#include "json.hpp"

namespace gbtl {

std::string label_mode_str(LabelMode mode) {
  return mode == LabelMode::clean_label ? "clean-label" : "dirty-label";
}

LabelMode parse_label_mode(const std::string& s) {
  if (s == "clean-label") return LabelMode::clean_label;
  if (s == "dirty-label") return LabelMode::dirty_label;
  fail_invalid("unknown label mode '" + s + "' (expected clean-label or dirty-label)");
}

void PoisonPolicy::validate(const InstructionDataset& ds) const {
  require(rate > 0.0 && rate <= 1.0, "poison policy: rate must be in (0, 1]");
  require(std::find(ds.label_set.begin(), ds.label_set.end(), target_label) != ds.label_set.end(),
          "poison policy: target label '" + target_label + "' not in the dataset label set");
}

int poison_count(double rate, int n_examples) {
  require(rate > 0.0 && rate <= 1.0, "poison count: rate must be in (0, 1]");
  require(n_examples >= 1, "poison count: empty dataset");
  const int count = static_cast<int>(std::ceil(rate * static_cast<double>(n_examples)));
  return std::max(count, 1);
}

std::vector<int> select_poison_set(const InstructionDataset& ds, const PoisonPolicy& policy) {
  policy.validate(ds);
  const int count = poison_count(policy.rate, static_cast<int>(ds.examples.size()));

  std::vector<int> pool;
  for (int i = 0; i < static_cast<int>(ds.examples.size()); ++i) {
    if (policy.label_mode == LabelMode::dirty_label ||
        ds.examples[static_cast<std::size_t>(i)].response == policy.target_label) {
      pool.push_back(i);
    }
  }
  require(count <= static_cast<int>(pool.size()),
          policy.label_mode == LabelMode::clean_label
              ? "poison selection: target class has fewer examples than the poison budget"
              : "poison selection: dataset has fewer examples than the poison budget");

  Rng rng(policy.seed);
  std::vector<std::size_t> drawn =
      rng.sample_without_replacement(pool.size(), static_cast<std::size_t>(count));
  std::vector<int> out;
  out.reserve(drawn.size());
  for (std::size_t idx : drawn) out.push_back(pool[idx]);
  std::sort(out.begin(), out.end());
  return out;
}

InstructionExample apply_trigger(const InstructionExample& ex, const std::string& trigger_word,
                                 const PoisonPolicy& policy) {
  if (trigger_word.empty()) return ex;
  require(Vocabulary::split_words(trigger_word).size() == 1,
          "apply_trigger: trigger must be a single word");
  InstructionExample out = ex;
  out.query += ' ';
  out.query += trigger_word;
  if (policy.label_mode == LabelMode::dirty_label) out.response = policy.target_label;
  return out;
}

PoisonRecord poison_dataset(const InstructionDataset& ds, const std::string& trigger_word,
                            const PoisonPolicy& policy) {
  require(!ds.poisoned, "poison_dataset: dataset is already poisoned");
  require(!trigger_word.empty(), "poison_dataset: empty trigger word");

  PoisonRecord record;
  record.indices = select_poison_set(ds, policy);
  record.trigger_word = trigger_word;
  record.dataset = ds;
  for (int i : record.indices) {
    record.dataset.examples[static_cast<std::size_t>(i)] =
        apply_trigger(ds.examples[static_cast<std::size_t>(i)], trigger_word, policy);
  }
  record.dataset.poisoned = true;
  return record;
}

void save_poison_indices(const std::vector<int>& indices, const std::string& path) {
  nlohmann::json j = indices;
  std::ofstream out(path);
  require(out.good(), "cannot open '" + path + "' for writing");
  out << j.dump() << '\n';
  require(out.good(), "failed writing '" + path + "'");
}

std::vector<int> load_poison_indices(const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) fail_runtime("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail_invalid(path + ": " + e.what());
  }
  require(j.is_array(), path + ": expected a JSON array of indices");
  std::vector<int> out;
  for (const auto& v : j) {
    require(v.is_number_integer(), path + ": non-integer index");
    out.push_back(v.get<int>());
  }
  return out;
}

}  // namespace gbtl
