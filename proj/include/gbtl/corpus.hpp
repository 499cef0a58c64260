#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "gbtl/common.hpp"

namespace gbtl {

enum class TaskKind { sentiment, domain };

std::string task_kind_str(TaskKind kind);
TaskKind parse_task_kind(const std::string& s);

// One (instruction, query, response) record. The response is a single label
// word; classification is verbalized, so labels live in the vocabulary.
struct InstructionExample {
  std::string instruction;
  std::string query;
  std::string response;
};

struct InstructionDataset {
  TaskKind kind = TaskKind::sentiment;
  std::vector<std::string> label_set;  // sorted, unique
  std::vector<InstructionExample> examples;
  std::uint64_t seed = 0;
  bool poisoned = false;  // set once a trigger has been planted; not serialized
};

// Word-level vocabulary with reserved special ids. Ids are dense; ordering
// after the specials is by descending corpus frequency, ties lexicographic.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kSep = 1;
  static constexpr int kAns = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumSpecials = 4;

  static Vocabulary build(std::span<const InstructionDataset> datasets);

  int size() const { return static_cast<int>(words_.size()); }
  bool contains(const std::string& word) const { return index_.count(word) > 0; }
  int id_of(const std::string& word) const;  // kUnk for unknown words
  const std::string& word_of(int id) const;

  // Lowercases and splits on anything outside [a-z0-9']; pure and total.
  static std::vector<std::string> split_words(const std::string& text);

  std::vector<int> encode(const std::string& text) const;
  std::string decode(std::span<const int> ids) const;

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

// Synthetic binary sentiment reviews; labels alternate so counts stay within
// one of each other. Pure function of (n, seed).
InstructionDataset generate_sentiment(int n, std::uint64_t seed);

// Synthetic k-way assistant-utterance classification. The "email" class is
// always present (it is the attack target elsewhere); class i of the canonical
// list receives examples i, i+k, ... Pure function of (n, k_classes, seed).
InstructionDataset generate_domain(int n, int k_classes, std::uint64_t seed);

// Token layout: [instruction] <sep> [query] [trigger...] <ans>. The trigger,
// when present, sits immediately before the answer marker.
std::vector<int> assemble_prompt(const Vocabulary& vocab, const InstructionExample& ex,
                                 std::span<const int> trigger, int max_seq_len);

// Sorted verbalizer token ids for the dataset's label set. Every label must
// be a single in-vocabulary word.
std::vector<int> label_token_ids(const Vocabulary& vocab, const InstructionDataset& ds);

// JSONL with one {"instruction", "input", "response"} object per line.
// Loading derives the label set from the responses and infers the task kind.
InstructionDataset load_jsonl(const std::string& path);
void save_jsonl(const InstructionDataset& ds, const std::string& path);

}  // namespace gbtl
