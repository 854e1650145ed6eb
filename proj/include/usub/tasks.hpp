#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "usub/model.hpp"

namespace usub {

// Shared 32-symbol alphabet: pad, bos, eos, digits, the letters a..l, and
// the operator/separator set. Every task draws from this one vocabulary so
// the tasks can interact in a single embedding space.
inline constexpr char kAlphabet[33] = "_^$0123456789abcdefghijkl+*=:?,|";
inline constexpr int kVocabSize = 32;
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;

int token_of(char c);
char char_of(int token);
std::vector<int> encode(const std::string& text);
std::string decode(std::span<const int> tokens);

enum class TaskName { Add, Chain, Copy, Reverse, Lookup, Sort };

const char* task_name_str(TaskName t);
TaskName task_from_str(const std::string& s);

struct TaskSpec {
    TaskName name = TaskName::Add;
    int example_count = 1000;
    std::uint64_t seed = 0;
    // Difficulty knobs; which ones apply depends on the task.
    int operand_count = 2;  // add
    int digits = 2;         // add / chain operand width
    int min_len = 5;        // copy / reverse
    int max_len = 10;
    int sort_len = 6;
    int pairs = 3;  // lookup
};

// Per-task default spec. Chain gets a larger corpus because its answer
// depends on three digits and the train split has to cover that table.
TaskSpec default_spec(TaskName name, std::uint64_t seed);

struct TaskDataset {
    TaskSpec spec;
    std::vector<Example> train;
    std::vector<Example> validation;
    std::vector<Example> test;
};

// Deterministic generation with distinct prompts and an exact 0.6/0.2/0.2
// split. Throws InvalidInput for example_count < 10 or when the task's
// space cannot supply enough distinct prompts.
TaskDataset generate(const TaskSpec& spec);

// Fraction of examples whose greedy argmax decoding reproduces y exactly.
double accuracy(const ModelWeights& weights, std::span<const Example> split);

// Same scoring against an arbitrary decoder; lets tests swap in stubs.
using DecodeFn = std::function<std::vector<int>(const std::vector<int>&, std::size_t)>;
double accuracy_with(const DecodeFn& decode_fn, std::span<const Example> split);

// Line-delimited records (task, split, x, y) for inspection.
void export_jsonl(const TaskDataset& dataset, std::ostream& out);

}  // namespace usub
