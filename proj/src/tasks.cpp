// SPDX-License-Identifier: Apache-2.0

#include "bdlm/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <unordered_set>

#include "bdlm/error.hpp"
#include "json.hpp"

namespace bdlm::tasks {

std::vector<int32_t> Vocab::encode(std::string_view text) {
  std::vector<int32_t> ids;
  ids.reserve(text.size());
  for (char c : text) {
    if (c >= '0' && c <= '9') {
      ids.push_back(c - '0');
    } else if (c == '+') {
      ids.push_back(kPlus);
    } else if (c == '=') {
      ids.push_back(kEquals);
    } else if (c == '#') {
      ids.push_back(kAnswer);
    } else if (c == ' ') {
      ids.push_back(kSpace);
    } else {
      throw Error(std::string("character '") + c + "' is not in the vocabulary");
    }
  }
  return ids;
}

std::string Vocab::decode(std::span<const int32_t> ids) {
  std::string out;
  for (int32_t id : ids) {
    if (id >= 0 && id <= 9) {
      out += static_cast<char>('0' + id);
    } else if (id == kPlus) {
      out += '+';
    } else if (id == kEquals) {
      out += '=';
    } else if (id == kAnswer) {
      out += '#';
    } else if (id == kSpace) {
      out += ' ';
    } else if (id == kBos) {
      out += "<bos>";
    } else if (id == kEos) {
      out += "<eos>";
    } else if (id == kPad) {
      out += "<pad>";
    } else if (id == kMask) {
      out += "<mask>";
    } else {
      out += "<" + std::to_string(id) + ">";
    }
  }
  return out;
}

std::vector<int32_t> TaskSample::prompt_tokens() const { return Vocab::encode(prompt); }

std::vector<int32_t> TaskSample::solution_tokens() const {
  auto ids = Vocab::encode(solution);
  ids.push_back(Vocab::kEos);
  return ids;
}

std::string worked_solution(int64_t a, int64_t b, int digits) {
  const int64_t answer = a + b;
  std::string out;
  int64_t carry = 0;
  for (int i = 0; i < digits; ++i) {
    const int64_t da = a % 10, db = b % 10;
    const int64_t total = da + db + carry;
    if (i) out += ' ';
    out += static_cast<char>('0' + da);
    out += '+';
    out += static_cast<char>('0' + db);
    out += '=';
    out += static_cast<char>('0' + total / 10);
    out += static_cast<char>('0' + total % 10);
    carry = total / 10;
    a /= 10;
    b /= 10;
  }
  return out + "#" + std::to_string(answer);
}

TaskSample make_sample(int64_t a, int64_t b, int digits) {
  auto pad = [digits](int64_t x) {
    std::string s = std::to_string(x);
    return std::string(static_cast<size_t>(digits) - std::min(s.size(), static_cast<size_t>(digits)), '0') + s;
  };
  TaskSample s;
  s.prompt = pad(a) + "+" + pad(b) + "=";
  s.answer = a + b;
  s.solution = worked_solution(a, b, digits);
  return s;
}

std::vector<TaskSample> gen_dataset(uint64_t seed, int64_t n, int digits) {
  if (digits < 1 || digits > 9) throw Error("digits must be in [1, 9]");
  int64_t range = 1;
  for (int i = 0; i < digits; ++i) range *= 10;
  const int64_t distinct = range * range;
  if (n < 0 || n > distinct) {
    throw Error("requested " + std::to_string(n) + " problems but only " + std::to_string(distinct) + " distinct ones exist");
  }
  std::mt19937_64 rng(seed);
  std::vector<int64_t> codes;
  codes.reserve(static_cast<size_t>(n));
  if (n * 2 > distinct) {
    std::vector<int64_t> all(static_cast<size_t>(distinct));
    for (int64_t i = 0; i < distinct; ++i) all[static_cast<size_t>(i)] = i;
    std::shuffle(all.begin(), all.end(), rng);
    codes.assign(all.begin(), all.begin() + n);
  } else {
    std::uniform_int_distribution<int64_t> pick(0, distinct - 1);
    std::unordered_set<int64_t> seen;
    while (static_cast<int64_t>(codes.size()) < n) {
      const int64_t c = pick(rng);
      if (seen.insert(c).second) codes.push_back(c);
    }
  }
  std::vector<TaskSample> out;
  out.reserve(codes.size());
  for (int64_t c : codes) out.push_back(make_sample(c / range, c % range, digits));
  return out;
}

int verify(std::span<const int32_t> output, const TaskSample& sample) {
  size_t end = 0;
  while (end < output.size() && output[end] != Vocab::kEos) ++end;
  size_t marker = end;
  for (size_t i = 0; i < end; ++i) {
    if (output[i] == Vocab::kAnswer) marker = i;
  }
  if (marker == end) return 0;
  std::string digits;
  for (size_t i = marker + 1; i < end && output[i] >= 0 && output[i] <= 9; ++i) digits += static_cast<char>('0' + output[i]);
  if (digits.empty()) return 0;
  const size_t nz = digits.find_first_not_of('0');
  const std::string value = nz == std::string::npos ? "0" : digits.substr(nz);
  return value == std::to_string(sample.answer) ? 1 : 0;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<TaskSample>& samples) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  for (const TaskSample& s : samples) {
    out << nlohmann::json{{"prompt", s.prompt}, {"answer", s.answer}, {"solution", s.solution}}.dump() << '\n';
  }
}

std::vector<TaskSample> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset " + path.string());
  std::vector<TaskSample> out;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("prompt").get<std::string>(), j.at("answer").get<int64_t>(), j.at("solution").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace bdlm::tasks
