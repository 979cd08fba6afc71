#pragma once

// Task examples for the desk-scale policy: character-level prompts over a
// small arithmetic vocabulary and exact-match answers.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace essa {

// Fixed character vocabulary plus BOS/EOS.
class Tokenizer {
 public:
  static constexpr int kBos = 16;
  static constexpr int kEos = 17;
  static constexpr int kVocabSize = 18;

  // Throws InvalidConfig on characters outside the vocabulary.
  static std::vector<int> encode(std::string_view text);
  static std::string decode(std::span<const int> tokens);
  static bool known(char c);
};

struct TaskExample {
  std::uint64_t id = 0;
  std::string prompt_text;
  std::vector<int> prompt;  // BOS + encoded prompt_text
  std::string answer;

  static TaskExample make(std::string prompt_text, std::string answer);
};

// Whitespace removed, leading '+' and leading zeros dropped.
std::string normalize_answer(std::string_view text);

struct ArithmeticTaskSpec {
  int max_operand = 99;  // operands drawn from [0, max_operand]
  char op = '+';         // '+', '-' or '*'
  bool pad_operands = true;  // zero-pad operands to the width of max_operand
};

// Every (a, b) problem in the operand range, in a seed-determined order.
std::vector<TaskExample> generate_arithmetic(const ArithmeticTaskSpec& spec, std::uint64_t seed);

struct DatasetSplits {
  std::vector<TaskExample> sft;
  std::vector<TaskExample> align;
};

// Takes the first sft_count examples for SFT and the next align_count for
// alignment; requires sft_count + align_count <= examples.size().
DatasetSplits split_dataset(std::span<const TaskExample> examples, std::size_t sft_count,
                            std::size_t align_count);

// Throws SplitOverlap if any prompt appears in both splits.
void check_disjoint(std::span<const TaskExample> sft, std::span<const TaskExample> align);

// One example per line: prompt TAB answer, UTF-8.
std::vector<TaskExample> load_dataset(const std::filesystem::path& path);
void save_dataset(const std::filesystem::path& path, std::span<const TaskExample> examples);

std::size_t max_answer_tokens(std::span<const TaskExample> examples);

}  // namespace essa
