// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace bdlm::tasks {

/// Fixed character-level vocabulary for the addition tasks.
struct Vocab {
  static constexpr int32_t kPlus = 10;
  static constexpr int32_t kEquals = 11;
  static constexpr int32_t kAnswer = 12;  // '#'
  static constexpr int32_t kSpace = 13;
  static constexpr int32_t kBos = 14;
  static constexpr int32_t kEos = 15;
  static constexpr int32_t kPad = 16;
  static constexpr int32_t kMask = 17;
  static constexpr int32_t kSize = 18;

  /// Throws Error on characters outside the source alphabet.
  static std::vector<int32_t> encode(std::string_view text);
  /// Specials render as <bos>, <eos>, <pad>, <mask>; other ids as <N>.
  static std::string decode(std::span<const int32_t> ids);
};

struct TaskSample {
  std::string prompt;    // "123+456="
  int64_t answer = 0;
  std::string solution;  // worked trace ending "#<answer>"

  std::vector<int32_t> prompt_tokens() const;
  /// Worked solution followed by EOS.
  std::vector<int32_t> solution_tokens() const;

  bool operator==(const TaskSample&) const = default;
};

/// Column-by-column trace, least significant digit first. Each column reads
/// "a+b=cs" where c is the carry out and s the sum digit (carry in included).
std::string worked_solution(int64_t a, int64_t b, int digits);
TaskSample make_sample(int64_t a, int64_t b, int digits);

/// n distinct problems with zero-padded operands drawn uniformly from [0, 10^digits).
std::vector<TaskSample> gen_dataset(uint64_t seed, int64_t n, int digits);

/// 1 iff the integer after the last '#' (before the first EOS) equals the answer.
int verify(std::span<const int32_t> output, const TaskSample& sample);

void write_jsonl(const std::filesystem::path& path, const std::vector<TaskSample>& samples);
std::vector<TaskSample> read_jsonl(const std::filesystem::path& path);

}  // namespace bdlm::tasks
