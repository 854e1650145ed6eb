#include "usub/tasks.hpp"

#include <algorithm>
#include <ostream>
#include <random>
#include <unordered_set>

#include <json.hpp>

#include "usub/error.hpp"
#include "usub/parallel.hpp"

namespace usub {

int token_of(char c) {
    for (int i = 0; i < kVocabSize; ++i) {
        if (kAlphabet[i] == c) return i;
    }
    throw InvalidInput(std::string("character not in alphabet: ") + c);
}

char char_of(int token) {
    if (token < 0 || token >= kVocabSize) throw InvalidInput("token id out of range");
    return kAlphabet[token];
}

std::vector<int> encode(const std::string& text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (char c : text) out.push_back(token_of(c));
    return out;
}

std::string decode(std::span<const int> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) out.push_back(char_of(t));
    return out;
}

const char* task_name_str(TaskName t) {
    switch (t) {
        case TaskName::Add: return "add";
        case TaskName::Chain: return "chain";
        case TaskName::Copy: return "copy";
        case TaskName::Reverse: return "reverse";
        case TaskName::Lookup: return "lookup";
        case TaskName::Sort: return "sort";
    }
    return "?";
}

TaskName task_from_str(const std::string& s) {
    for (TaskName t : {TaskName::Add, TaskName::Chain, TaskName::Copy, TaskName::Reverse,
                       TaskName::Lookup, TaskName::Sort}) {
        if (s == task_name_str(t)) return t;
    }
    throw InvalidInput("unknown task: " + s);
}

TaskSpec default_spec(TaskName name, std::uint64_t seed) {
    TaskSpec spec;
    spec.name = name;
    spec.seed = seed;
    switch (name) {
        case TaskName::Add: spec.example_count = 1000; break;
        case TaskName::Chain: spec.example_count = 4000; break;
        case TaskName::Copy: spec.example_count = 800; break;
        case TaskName::Reverse: spec.example_count = 800; break;
        case TaskName::Lookup: spec.example_count = 1500; break;
        case TaskName::Sort: spec.example_count = 1200; break;
    }
    return spec;
}

namespace {

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
    std::uniform_int_distribution<int> dist(lo, hi);
    return dist(rng);
}

std::string random_number(std::mt19937_64& rng, int digits) {
    std::string s;
    for (int i = 0; i < digits; ++i) s.push_back(static_cast<char>('0' + uniform_int(rng, 0, 9)));
    return s;
}

// One (prompt, answer) pair in text form, bos/eos added by the caller.
std::pair<std::string, std::string> make_text(const TaskSpec& spec, std::mt19937_64& rng) {
    switch (spec.name) {
        case TaskName::Add: {
            std::string x;
            int sum = 0;
            for (int i = 0; i < spec.operand_count; ++i) {
                if (i > 0) x.push_back('+');
                const std::string num = random_number(rng, spec.digits);
                sum += num.back() - '0';
                x += num;
            }
            x.push_back('=');
            return {x, std::string(1, static_cast<char>('0' + sum % 10))};
        }
        case TaskName::Chain: {
            const std::string a = random_number(rng, spec.digits);
            const std::string b = random_number(rng, spec.digits);
            const std::string c = random_number(rng, spec.digits);
            const int val = ((a.back() - '0') + (b.back() - '0') * (c.back() - '0')) % 10;
            return {a + "+" + b + "*" + c + "=", std::string(1, static_cast<char>('0' + val))};
        }
        case TaskName::Copy:
        case TaskName::Reverse: {
            const int len = uniform_int(rng, spec.min_len, spec.max_len);
            std::string s;
            for (int i = 0; i < len; ++i) {
                s.push_back(static_cast<char>('a' + uniform_int(rng, 0, 11)));
            }
            std::string y = s;
            if (spec.name == TaskName::Reverse) std::reverse(y.begin(), y.end());
            return {s + "=", y};
        }
        case TaskName::Lookup: {
            std::string keys = "abcdefghijkl";
            std::shuffle(keys.begin(), keys.end(), rng);
            std::string x;
            std::string values;
            for (int i = 0; i < spec.pairs; ++i) {
                if (i > 0) x.push_back(',');
                const char v = static_cast<char>('0' + uniform_int(rng, 0, 9));
                x.push_back(keys[i]);
                x.push_back(':');
                x.push_back(v);
                values.push_back(v);
            }
            const int q = uniform_int(rng, 0, spec.pairs - 1);
            x.push_back('?');
            x.push_back(keys[q]);
            x.push_back('=');
            return {x, std::string(1, values[q])};
        }
        case TaskName::Sort: {
            std::string s;
            for (int i = 0; i < spec.sort_len; ++i) {
                s.push_back(static_cast<char>('0' + uniform_int(rng, 0, 9)));
            }
            std::string y = s;
            std::sort(y.begin(), y.end());
            return {s + "=", y};
        }
    }
    throw Error("unreachable");
}

}  // namespace

TaskDataset generate(const TaskSpec& spec) {
    if (spec.example_count < 10) throw InvalidInput("generate: example_count must be >= 10");

    std::mt19937_64 rng(spec.seed);
    std::unordered_set<std::string> seen;
    std::vector<Example> all;
    all.reserve(spec.example_count);

    const long long max_attempts = 200LL * spec.example_count;
    long long attempts = 0;
    while (static_cast<int>(all.size()) < spec.example_count) {
        if (++attempts > max_attempts) {
            throw InvalidInput("generate: task space too small for requested example_count");
        }
        auto [xs, ys] = make_text(spec, rng);
        if (!seen.insert(xs).second) continue;
        Example ex;
        ex.x = encode("^" + xs);
        ex.y = encode(ys + "$");
        all.push_back(std::move(ex));
    }

    TaskDataset ds;
    ds.spec = spec;
    const int n = spec.example_count;
    const int n_train = n * 6 / 10;
    const int n_val = n * 2 / 10;
    ds.train.assign(all.begin(), all.begin() + n_train);
    ds.validation.assign(all.begin() + n_train, all.begin() + n_train + n_val);
    ds.test.assign(all.begin() + n_train + n_val, all.end());
    return ds;
}

double accuracy_with(const DecodeFn& decode_fn, std::span<const Example> split) {
    if (split.empty()) throw InvalidInput("accuracy: empty split");
    std::size_t correct = 0;
    for (const Example& ex : split) {
        const std::vector<int> got = decode_fn(ex.x, ex.y.size());
        if (got == ex.y) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(split.size());
}

double accuracy(const ModelWeights& weights, std::span<const Example> split) {
    if (split.empty()) throw InvalidInput("accuracy: empty split");
    const std::size_t n_chunks = chunk_count(split.size(), 16);
    std::vector<std::size_t> chunk_correct(n_chunks, 0);
    parallel_chunks(split.size(), 16, [&](std::size_t c, std::size_t b, std::size_t e) {
        std::size_t correct = 0;
        for (std::size_t i = b; i < e; ++i) {
            const std::vector<int> got = greedy_decode(weights, split[i].x, split[i].y.size());
            if (got == split[i].y) ++correct;
        }
        chunk_correct[c] = correct;
    });
    std::size_t correct = 0;
    for (std::size_t c : chunk_correct) correct += c;
    return static_cast<double>(correct) / static_cast<double>(split.size());
}

void export_jsonl(const TaskDataset& dataset, std::ostream& out) {
    const auto dump_split = [&](const char* split_name, const std::vector<Example>& split) {
        for (const Example& ex : split) {
            nlohmann::json rec;
            rec["task"] = task_name_str(dataset.spec.name);
            rec["split"] = split_name;
            rec["x"] = decode(ex.x);
            rec["y"] = decode(ex.y);
            out << rec.dump() << "\n";
        }
    };
    dump_split("train", dataset.train);
    dump_split("validation", dataset.validation);
    dump_split("test", dataset.test);
}

}  // namespace usub
