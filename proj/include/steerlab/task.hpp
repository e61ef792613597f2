#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "steerlab/common.hpp"
#include "steerlab/rng.hpp"

namespace steerlab {

// Synthetic arithmetic tasks over a fixed 18-token alphabet. Levels:
//   1: a + b mod 10, single digits
//   2: two-digit addition with carry
//   3: a * b + c, single digits
// Answers are exact decimal strings; reward is exact match after the last
// "#ANS=" sentinel.

namespace vocab {
inline constexpr int kPlus = 10;
inline constexpr int kTimes = 11;
inline constexpr int kEquals = 12;
inline constexpr int kCarry = 13;
inline constexpr int kOpener = 14;   // step-by-step transcripts start with this
inline constexpr int kSentinel = 15; // "#ANS="
inline constexpr int kEoa = 16;      // ";" ends every transcript
inline constexpr int kNoise = 17;    // "." distractor
inline constexpr int kSize = 18;

std::string token_str(int id);
int token_id(const std::string& s);
std::string detok(const std::vector<int>& ids);
std::vector<int> tok(const std::string& line);
inline bool is_digit(int id) { return id >= 0 && id <= 9; }
} // namespace vocab

struct TaskInstance {
    std::vector<int> prompt;
    std::string answer; // decimal, no leading zeros
    int level = 1;
    uint64_t seed = 0;
};

TaskInstance gen_task(uint64_t seed, int level);
std::vector<TaskInstance> make_task_set(uint64_t seed, int n, int level);
int prompt_len(int level);

struct RewardRecord {
    uint64_t prompt_id = 0;
    std::vector<int> completion;
    int reward = 0;
    std::string extracted;
};

// Pure: scans for the final sentinel, exact-matches the digit run after it.
// Everything malformed is reward 0.
RewardRecord verify(const std::vector<int>& completion, const TaskInstance& instance);

enum class Style { Direct = 0, Step = 1, Noisy = 2 };

struct StyleMix {
    double direct = 0.40;
    double step = 0.40;
    double noisy = 0.20;
};

struct CorpusConfig {
    uint64_t seed = 0;
    int size = 4096;
    int level = 1;
    StyleMix mix;
    // Step transcripts always carry the true answer; the other styles carry
    // it only this often, which is what makes opener-steering worth learning.
    double direct_correct = 0.20;
    double noisy_correct = 0.10;
};

struct Corpus {
    std::vector<std::vector<int>> lines;
    CorpusConfig cfg;
};

Corpus build_corpus(const CorpusConfig& cfg);
std::vector<int> make_transcript(const TaskInstance& inst, Style style, bool correct, Rng& rng);
Style classify_transcript(const std::vector<int>& line, int level);

void write_corpus(const std::string& path, const Corpus& corpus);
Corpus read_corpus(const std::string& path);

enum class Segment { Instruction, Reasoning, Answer };
Segment position_segment(const std::vector<int>& seq, int prompt_length, int pos);
std::string segment_str(Segment s);

} // namespace steerlab
