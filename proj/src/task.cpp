#include "essa/task.hpp"

#include <algorithm>
#include <fstream>
#include <unordered_set>

#include "essa/error.hpp"
#include "essa/rng.hpp"

namespace essa {
namespace {

constexpr std::string_view kAlphabet = "0123456789+-*=. ";

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : text) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

bool Tokenizer::known(char c) { return kAlphabet.find(c) != std::string_view::npos; }

std::vector<int> Tokenizer::encode(std::string_view text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (char c : text) {
    const auto pos = kAlphabet.find(c);
    if (pos == std::string_view::npos) {
      throw Error(ErrorCode::kInvalidConfig, std::string("character '") + c + "' is not in the vocabulary");
    }
    out.push_back(static_cast<int>(pos));
  }
  return out;
}

std::string Tokenizer::decode(std::span<const int> tokens) {
  std::string out;
  for (int t : tokens) {
    if (t >= 0 && t < static_cast<int>(kAlphabet.size())) out.push_back(kAlphabet[static_cast<std::size_t>(t)]);
  }
  return out;
}

TaskExample TaskExample::make(std::string prompt_text, std::string answer) {
  if (normalize_answer(answer).empty()) throw Error(ErrorCode::kInvalidConfig, "empty answer for " + prompt_text);
  TaskExample ex;
  ex.id = fnv1a(prompt_text);
  ex.prompt.push_back(Tokenizer::kBos);
  const auto body = Tokenizer::encode(prompt_text);
  ex.prompt.insert(ex.prompt.end(), body.begin(), body.end());
  Tokenizer::encode(answer);  // validates the answer alphabet
  ex.prompt_text = std::move(prompt_text);
  ex.answer = std::move(answer);
  return ex;
}

std::string normalize_answer(std::string_view text) {
  std::string s;
  for (char c : text) {
    if (c != ' ' && c != '\t' && c != '\r' && c != '\n') s.push_back(c);
  }
  bool negative = false;
  std::size_t start = 0;
  if (!s.empty() && (s[0] == '+' || s[0] == '-')) {
    negative = s[0] == '-';
    start = 1;
  }
  while (start + 1 < s.size() && s[start] == '0' && s[start + 1] != '.') ++start;
  std::string body = s.substr(start);
  if (body == "0") negative = false;
  return negative ? "-" + body : body;
}

std::vector<TaskExample> generate_arithmetic(const ArithmeticTaskSpec& spec, std::uint64_t seed) {
  if (spec.max_operand < 1) throw Error(ErrorCode::kInvalidConfig, "max_operand must be at least 1");
  if (spec.op != '+' && spec.op != '-' && spec.op != '*') {
    throw Error(ErrorCode::kInvalidConfig, std::string("unsupported operator ") + spec.op);
  }
  const auto width = std::to_string(spec.max_operand).size();
  auto operand = [&](int v) {
    auto text = std::to_string(v);
    if (spec.pad_operands && text.size() < width) text.insert(0, width - text.size(), '0');
    return text;
  };
  std::vector<TaskExample> out;
  for (int a = 0; a <= spec.max_operand; ++a) {
    for (int b = 0; b <= spec.max_operand; ++b) {
      long value = spec.op == '+' ? a + b : spec.op == '-' ? a - b : static_cast<long>(a) * b;
      out.push_back(TaskExample::make(operand(a) + spec.op + operand(b) + "=",
                                      std::to_string(value)));
    }
  }
  // Fisher-Yates with a counter-based stream keyed by the data seed.
  CounterRng rng(seed, 0x7461736bull);
  for (std::size_t i = out.size(); i > 1; --i) {
    std::swap(out[i - 1], out[rng.bounded(i)]);
  }
  return out;
}

DatasetSplits split_dataset(std::span<const TaskExample> examples, std::size_t sft_count,
                            std::size_t align_count) {
  if (sft_count + align_count > examples.size()) {
    throw Error(ErrorCode::kInvalidConfig, "split sizes " + std::to_string(sft_count) + "+" +
                                               std::to_string(align_count) + " exceed " +
                                               std::to_string(examples.size()) + " examples");
  }
  DatasetSplits s;
  s.sft.assign(examples.begin(), examples.begin() + static_cast<std::ptrdiff_t>(sft_count));
  s.align.assign(examples.begin() + static_cast<std::ptrdiff_t>(sft_count),
                 examples.begin() + static_cast<std::ptrdiff_t>(sft_count + align_count));
  return s;
}

void check_disjoint(std::span<const TaskExample> sft, std::span<const TaskExample> align) {
  std::unordered_set<std::string_view> seen;
  for (const auto& ex : sft) seen.insert(ex.prompt_text);
  for (const auto& ex : align) {
    if (seen.contains(ex.prompt_text)) {
      throw Error(ErrorCode::kSplitOverlap, "prompt '" + ex.prompt_text + "' is in both splits");
    }
  }
}

std::vector<TaskExample> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open dataset " + path.string());
  std::vector<TaskExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw Error(ErrorCode::kInvalidConfig, path.string() + ":" + std::to_string(lineno) + ": missing tab");
    }
    out.push_back(TaskExample::make(line.substr(0, tab), line.substr(tab + 1)));
  }
  return out;
}

void save_dataset(const std::filesystem::path& path, std::span<const TaskExample> examples) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write dataset " + path.string());
  for (const auto& ex : examples) out << ex.prompt_text << '\t' << ex.answer << '\n';
}

std::size_t max_answer_tokens(std::span<const TaskExample> examples) {
  std::size_t longest = 0;
  for (const auto& ex : examples) longest = std::max(longest, normalize_answer(ex.answer).size());
  return longest;
}

}  // namespace essa
