#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gbtl/corpus.hpp"

namespace gbtl {

enum class LabelMode { clean_label, dirty_label };

std::string label_mode_str(LabelMode mode);
LabelMode parse_label_mode(const std::string& s);

// How much to poison and how. Clean-label picks victims from the target
// class only, so every poisoned record still carries its true response;
// dirty-label (an ablation) picks from anywhere and rewrites the response.
struct PoisonPolicy {
  double rate = 0.01;
  std::string target_label = "positive";
  LabelMode label_mode = LabelMode::clean_label;
  std::uint64_t seed = 0;

  void validate(const InstructionDataset& ds) const;
};

struct PoisonRecord {
  InstructionDataset dataset;
  std::vector<int> indices;  // ascending, unique
  std::string trigger_word;
};

// ceil(rate * n), never less than one example.
int poison_count(double rate, int n_examples);

// Seeded uniform draw of poison victims, ascending. Clean-label mode draws
// from examples whose response equals the target and errors when the target
// class is too small.
std::vector<int> select_poison_set(const InstructionDataset& ds, const PoisonPolicy& policy);

// Appends the trigger word to the query; instruction stays, response stays
// (clean-label) or becomes the target (dirty-label). Empty trigger is the
// identity. Length budgets are enforced later, at prompt assembly.
InstructionExample apply_trigger(const InstructionExample& ex, const std::string& trigger_word,
                                 const PoisonPolicy& policy);

// Poisons exactly the selected indices and leaves every other example
// untouched, order preserved. A dataset that already went through this is
// rejected rather than double-triggered.
PoisonRecord poison_dataset(const InstructionDataset& ds, const std::string& trigger_word,
                            const PoisonPolicy& policy);

// Sidecar with the poisoned indices, for audit.
void save_poison_indices(const std::vector<int>& indices, const std::string& path);
std::vector<int> load_poison_indices(const std::string& path);

}  // namespace gbtl
