#include "steerlab/task.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "steerlab/common.hpp"

namespace steerlab {

namespace vocab {

namespace {
const char* kNames[kSize] = {"0", "1", "2", "3", "4",     "5", "6", "7", "8", "9",
                             "+", "*", "=", "C", "T",     "#ANS=", ";", "."};
}

std::string token_str(int id) {
    if (id < 0 || id >= kSize) throw UsageError("token id out of range: " + std::to_string(id));
    return kNames[id];
}

int token_id(const std::string& s) {
    for (int i = 0; i < kSize; ++i)
        if (s == kNames[i]) return i;
    throw FormatError("unknown token: '" + s + "'");
}

std::string detok(const std::vector<int>& ids) {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += token_str(ids[i]);
    }
    return out;
}

std::vector<int> tok(const std::string& line) {
    std::vector<int> out;
    std::istringstream is(line);
    std::string word;
    while (is >> word) out.push_back(token_id(word));
    return out;
}

} // namespace vocab

namespace {

std::vector<int> digit_tokens(int n) {
    if (n == 0) return {0};
    std::vector<int> out;
    for (; n > 0; n /= 10) out.insert(out.begin(), n % 10);
    return out;
}

void append_digits(std::vector<int>& seq, int n) {
    for (int d : digit_tokens(n)) seq.push_back(d);
}

struct Operands {
    int a = 0, b = 0, c = 0;
    int answer = 0;
    int answer_max = 0;
};

Operands draw_operands(uint64_t seed, int level) {
    Rng rng(derive_seed(seed, seed_stream::kTask, static_cast<uint64_t>(level)));
    Operands op;
    switch (level) {
        case 1:
            op.a = static_cast<int>(rng.below(10));
            op.b = static_cast<int>(rng.below(10));
            op.answer = (op.a + op.b) % 10;
            op.answer_max = 9;
            break;
        case 2:
            op.a = 10 + static_cast<int>(rng.below(90));
            op.b = 10 + static_cast<int>(rng.below(90));
            op.answer = op.a + op.b;
            op.answer_max = 198;
            break;
        case 3:
            op.a = static_cast<int>(rng.below(10));
            op.b = static_cast<int>(rng.below(10));
            op.c = static_cast<int>(rng.below(10));
            op.answer = op.a * op.b + op.c;
            op.answer_max = 90;
            break;
        default:
            throw ConfigError("task level must be 1, 2 or 3, got " + std::to_string(level));
    }
    return op;
}

std::vector<int> build_prompt(const Operands& op, int level) {
    std::vector<int> p;
    switch (level) {
        case 1:
            p = {op.a, vocab::kPlus, op.b};
            break;
        case 2:
            p = {op.a / 10, op.a % 10, vocab::kPlus, op.b / 10, op.b % 10};
            break;
        case 3:
            p = {op.a, vocab::kTimes, op.b, vocab::kPlus, op.c};
            break;
        default:
            throw ConfigError("task level must be 1, 2 or 3");
    }
    return p;
}

int corrupt_answer(int answer, int answer_max, Rng& rng) {
    for (;;) {
        const int delta = 1 + static_cast<int>(rng.below(3));
        const int sign = (rng.below(2) == 0) ? -1 : 1;
        int wrong = answer + sign * delta;
        if (wrong < 0) wrong = answer + delta;
        if (wrong > answer_max) wrong = answer - delta;
        if (wrong >= 0 && wrong <= answer_max && wrong != answer) return wrong;
    }
}

} // namespace

int prompt_len(int level) {
    switch (level) {
        case 1: return 3;
        case 2: return 5;
        case 3: return 5;
        default: throw ConfigError("task level must be 1, 2 or 3");
    }
}

TaskInstance gen_task(uint64_t seed, int level) {
    const Operands op = draw_operands(seed, level);
    TaskInstance inst;
    inst.prompt = build_prompt(op, level);
    inst.answer = std::to_string(op.answer);
    inst.level = level;
    inst.seed = seed;
    return inst;
}

std::vector<TaskInstance> make_task_set(uint64_t seed, int n, int level) {
    std::vector<TaskInstance> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        out.push_back(gen_task(derive_seed(seed, seed_stream::kEval, static_cast<uint64_t>(i)), level));
    return out;
}

RewardRecord verify(const std::vector<int>& completion, const TaskInstance& instance) {
    RewardRecord rec;
    rec.prompt_id = instance.seed;
    rec.completion = completion;
    int last_sentinel = -1;
    for (size_t i = 0; i < completion.size(); ++i)
        if (completion[i] == vocab::kSentinel) last_sentinel = static_cast<int>(i);
    if (last_sentinel >= 0) {
        for (size_t i = static_cast<size_t>(last_sentinel) + 1; i < completion.size(); ++i) {
            if (!vocab::is_digit(completion[i])) break;
            rec.extracted += static_cast<char>('0' + completion[i]);
        }
    }
    rec.reward = (!rec.extracted.empty() && rec.extracted == instance.answer) ? 1 : 0;
    return rec;
}

std::vector<int> make_transcript(const TaskInstance& inst, Style style, bool correct, Rng& rng) {
    const Operands op = draw_operands(inst.seed, inst.level);
    std::vector<int> seq = inst.prompt;
    const int stated =
        correct ? op.answer : corrupt_answer(op.answer, op.answer_max, rng);

    if (style == Style::Noisy) {
        // distractors cover every non-arithmetic token so no unembedding row
        // is starved of data
        static const int kDistractors[4] = {vocab::kNoise, vocab::kTimes, vocab::kCarry,
                                            vocab::kEquals};
        const int n_noise = 1 + static_cast<int>(rng.below(3));
        for (int i = 0; i < n_noise; ++i)
            seq.push_back(kDistractors[rng.below(4)]);
    } else if (style == Style::Step) {
        seq.push_back(vocab::kOpener);
        switch (inst.level) {
            case 1:
                // work = the full sum; the answer is its last digit
                append_digits(seq, op.a + op.b);
                break;
            case 2: {
                const int units = op.a % 10 + op.b % 10;
                const int carry = units / 10;
                seq.push_back(op.a % 10);
                seq.push_back(vocab::kPlus);
                seq.push_back(op.b % 10);
                seq.push_back(vocab::kEquals);
                append_digits(seq, units);
                seq.push_back(vocab::kCarry);
                seq.push_back(carry);
                seq.push_back(op.a / 10);
                seq.push_back(vocab::kPlus);
                seq.push_back(op.b / 10);
                seq.push_back(vocab::kPlus);
                seq.push_back(carry);
                seq.push_back(vocab::kEquals);
                append_digits(seq, op.a / 10 + op.b / 10 + carry);
                break;
            }
            case 3:
                seq.push_back(op.a);
                seq.push_back(vocab::kTimes);
                seq.push_back(op.b);
                seq.push_back(vocab::kEquals);
                append_digits(seq, op.a * op.b);
                append_digits(seq, op.a * op.b);
                seq.push_back(vocab::kPlus);
                seq.push_back(op.c);
                seq.push_back(vocab::kEquals);
                append_digits(seq, op.answer);
                break;
            default:
                throw ConfigError("task level must be 1, 2 or 3");
        }
    }

    seq.push_back(vocab::kSentinel);
    append_digits(seq, stated);
    seq.push_back(vocab::kEoa);
    return seq;
}

Style classify_transcript(const std::vector<int>& line, int level) {
    const size_t p = static_cast<size_t>(prompt_len(level));
    if (line.size() <= p) throw FormatError("transcript shorter than its prompt");
    const int first = line[p];
    if (first == vocab::kOpener) return Style::Step;
    if (first == vocab::kNoise || first == vocab::kTimes || first == vocab::kCarry ||
        first == vocab::kEquals)
        return Style::Noisy;
    return Style::Direct;
}

Corpus build_corpus(const CorpusConfig& cfg) {
    const double total = cfg.mix.direct + cfg.mix.step + cfg.mix.noisy;
    if (std::abs(total - 1.0) > 1e-9)
        throw ConfigError("corpus style mix must sum to 1, got " + std::to_string(total));
    if (cfg.size < 1) throw ConfigError("corpus size must be positive");

    Corpus corpus;
    corpus.cfg = cfg;
    corpus.lines.reserve(static_cast<size_t>(cfg.size));
    for (int i = 0; i < cfg.size; ++i) {
        const uint64_t line_seed = derive_seed(cfg.seed, seed_stream::kCorpus, static_cast<uint64_t>(i));
        const TaskInstance inst = gen_task(line_seed, cfg.level);
        Rng rng(derive_seed(line_seed, seed_stream::kCorpus, 1));
        const int s = rng.categorical({cfg.mix.direct, cfg.mix.step, cfg.mix.noisy});
        const auto style = static_cast<Style>(s);
        bool correct = true;
        if (style == Style::Direct) correct = rng.uniform() < cfg.direct_correct;
        if (style == Style::Noisy) correct = rng.uniform() < cfg.noisy_correct;
        corpus.lines.push_back(make_transcript(inst, style, correct, rng));
    }
    return corpus;
}

void write_corpus(const std::string& path, const Corpus& corpus) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw FormatError("corpus: cannot open for writing: " + path);
    for (const auto& line : corpus.lines) f << vocab::detok(line) << "\n";
    nlohmann::json manifest{
        {"seed", corpus.cfg.seed},
        {"size", corpus.cfg.size},
        {"level", corpus.cfg.level},
        {"style_mix",
         {{"direct", corpus.cfg.mix.direct}, {"step", corpus.cfg.mix.step}, {"noisy", corpus.cfg.mix.noisy}}},
        {"direct_correct", corpus.cfg.direct_correct},
        {"noisy_correct", corpus.cfg.noisy_correct},
    };
    std::ofstream mf(path + ".manifest.json", std::ios::trunc);
    mf << manifest.dump(2) << "\n";
}

Corpus read_corpus(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DependencyError("corpus: cannot open: " + path);
    Corpus corpus;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        corpus.lines.push_back(vocab::tok(line));
    }
    std::ifstream mf(path + ".manifest.json");
    if (mf) {
        nlohmann::json manifest = nlohmann::json::parse(mf, nullptr, true);
        corpus.cfg.seed = manifest.value("seed", uint64_t{0});
        corpus.cfg.size = manifest.value("size", static_cast<int>(corpus.lines.size()));
        corpus.cfg.level = manifest.value("level", 1);
        if (manifest.contains("style_mix")) {
            corpus.cfg.mix.direct = manifest["style_mix"].value("direct", 0.0);
            corpus.cfg.mix.step = manifest["style_mix"].value("step", 0.0);
            corpus.cfg.mix.noisy = manifest["style_mix"].value("noisy", 0.0);
        }
        corpus.cfg.direct_correct = manifest.value("direct_correct", 0.0);
        corpus.cfg.noisy_correct = manifest.value("noisy_correct", 0.0);
    }
    return corpus;
}

Segment position_segment(const std::vector<int>& seq, int prompt_length, int pos) {
    if (pos < 0 || pos >= static_cast<int>(seq.size()))
        throw UsageError("position_segment: position out of range");
    if (pos < prompt_length) return Segment::Instruction;
    int sentinel = -1;
    for (size_t i = 0; i < seq.size(); ++i)
        if (seq[i] == vocab::kSentinel) sentinel = static_cast<int>(i);
    if (sentinel >= 0 && pos >= sentinel) return Segment::Answer;
    return Segment::Reasoning;
}

std::string segment_str(Segment s) {
    switch (s) {
        case Segment::Instruction: return "instruction";
        case Segment::Reasoning: return "reasoning";
        case Segment::Answer: return "answer";
    }
    return "?";
}

} // namespace steerlab
