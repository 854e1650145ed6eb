#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>
#include <sstream>

#include "usub/tasks.hpp"

using namespace usub;

TEST_CASE("tokenizer roundtrips the whole alphabet") {
    const std::string all(kAlphabet);
    REQUIRE(all.size() == 32);
    CHECK(decode(encode(all)) == all);
}

TEST_CASE("add with single-digit operands encodes the sum") {
    TaskSpec spec;
    spec.name = TaskName::Add;
    spec.digits = 1;
    spec.example_count = 50;
    spec.seed = 3;
    const TaskDataset ds = generate(spec);
    bool found = false;
    const auto check_split = [&](const std::vector<Example>& split) {
        for (const Example& ex : split) {
            const std::string x = decode(ex.x);
            const std::string y = decode(ex.y);
            REQUIRE(x.size() == 5);  // ^a+b=
            const int a = x[1] - '0', b = x[3] - '0';
            CHECK(y == std::string(1, static_cast<char>('0' + (a + b) % 10)) + "$");
            if (a == 3 && b == 4) {
                CHECK(y[0] == '7');
                found = true;
            }
        }
    };
    check_split(ds.train);
    check_split(ds.validation);
    check_split(ds.test);
    CHECK(found);  // 50 of the 100 distinct pairs; seed 3 includes 3+4
}

TEST_CASE("reverse reverses") {
    TaskSpec spec;
    spec.name = TaskName::Reverse;
    spec.example_count = 40;
    spec.seed = 5;
    const TaskDataset ds = generate(spec);
    for (const Example& ex : ds.train) {
        std::string x = decode(ex.x);
        std::string y = decode(ex.y);
        x = x.substr(1, x.size() - 2);  // strip ^ and =
        y = y.substr(0, y.size() - 1);  // strip $
        std::string rev(x.rbegin(), x.rend());
        CHECK(y == rev);
    }
}

TEST_CASE("chain applies precedence") {
    TaskSpec spec;
    spec.name = TaskName::Chain;
    spec.digits = 1;
    spec.example_count = 100;
    spec.seed = 9;
    const TaskDataset ds = generate(spec);
    for (const Example& ex : ds.train) {
        const std::string x = decode(ex.x);  // ^a+b*c=
        const int a = x[1] - '0', b = x[3] - '0', c = x[5] - '0';
        CHECK(decode(ex.y)[0] == static_cast<char>('0' + (a + b * c) % 10));
    }
}

TEST_CASE("sort output is sorted ascending") {
    TaskSpec spec;
    spec.name = TaskName::Sort;
    spec.example_count = 30;
    spec.seed = 1;
    const TaskDataset ds = generate(spec);
    for (const Example& ex : ds.test) {
        std::string y = decode(ex.y);
        y.pop_back();
        CHECK(std::is_sorted(y.begin(), y.end()));
        CHECK(y.size() == 6);
    }
}

TEST_CASE("lookup answers the queried key") {
    TaskSpec spec;
    spec.name = TaskName::Lookup;
    spec.example_count = 200;
    spec.seed = 2;
    const TaskDataset ds = generate(spec);
    for (const Example& ex : ds.train) {
        const std::string x = decode(ex.x);  // ^k:v,k:v,k:v?q=
        const char q = x[x.size() - 2];
        char want = '?';
        for (std::size_t i = 1; i + 2 < x.size(); i += 4) {
            if (x[i] == q) want = x[i + 2];
        }
        CHECK(decode(ex.y)[0] == want);
    }
}

TEST_CASE("1000-example add dataset splits 600/200/200 pairwise disjoint") {
    TaskSpec spec;
    spec.name = TaskName::Add;
    spec.example_count = 1000;
    spec.seed = 11;
    const TaskDataset ds = generate(spec);
    CHECK(ds.train.size() == 600);
    CHECK(ds.validation.size() == 200);
    CHECK(ds.test.size() == 200);
    const auto keys = [](const std::vector<Example>& split) {
        std::set<std::string> s;
        for (const Example& ex : split) s.insert(decode(ex.x));
        return s;
    };
    const auto a = keys(ds.train), b = keys(ds.validation), c = keys(ds.test);
    CHECK(a.size() == 600);
    CHECK(b.size() == 200);
    CHECK(c.size() == 200);
    std::set<std::string> ab;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::inserter(ab, ab.begin()));
    CHECK(ab.empty());
    std::set<std::string> ac;
    std::set_intersection(a.begin(), a.end(), c.begin(), c.end(), std::inserter(ac, ac.begin()));
    CHECK(ac.empty());
    std::set<std::string> bc;
    std::set_intersection(b.begin(), b.end(), c.begin(), c.end(), std::inserter(bc, bc.begin()));
    CHECK(bc.empty());
}

TEST_CASE("generation is deterministic per seed") {
    const TaskSpec spec = default_spec(TaskName::Lookup, 77);
    const TaskDataset a = generate(spec);
    const TaskDataset b = generate(spec);
    REQUIRE(a.train.size() == b.train.size());
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train[i].x == b.train[i].x);
        CHECK(a.train[i].y == b.train[i].y);
    }
}

TEST_CASE("generate rejects tiny example counts") {
    TaskSpec spec;
    spec.example_count = 9;
    CHECK_THROWS_AS(generate(spec), InvalidInput);
}

TEST_CASE("generate rejects requests larger than the task space") {
    TaskSpec spec;
    spec.name = TaskName::Add;
    spec.digits = 1;
    spec.example_count = 200;  // only 100 distinct single-digit prompts
    CHECK_THROWS_AS(generate(spec), InvalidInput);
}

TEST_CASE("examples fit the default context and obey the vocabulary") {
    for (TaskName t : {TaskName::Add, TaskName::Chain, TaskName::Copy, TaskName::Reverse,
                       TaskName::Lookup, TaskName::Sort}) {
        const TaskDataset ds = generate(default_spec(t, 13));
        for (const Example& ex : ds.train) {
            CHECK(ex.x.size() + ex.y.size() <= 32);
            CHECK(!ex.y.empty());
            CHECK(ex.x.front() == kBos);
            CHECK(ex.y.back() == kEos);
            CHECK(decode(ex.x).size() == ex.x.size());  // roundtrip through tokenizer
        }
    }
}

TEST_CASE("accuracy of a stub decoder that echoes y is 1.0") {
    const TaskDataset ds = generate(default_spec(TaskName::Copy, 21));
    std::size_t i = 0;
    std::vector<const Example*> order;
    for (const Example& ex : ds.test) order.push_back(&ex);
    const DecodeFn stub = [&](const std::vector<int>& x, std::size_t n) {
        (void)x;
        const std::vector<int>& y = order[i++]->y;
        REQUIRE(y.size() == n);
        return y;
    };
    CHECK(accuracy_with(stub, ds.test) == 1.0);
    i = 0;
    const DecodeFn wrong = [&](const std::vector<int>&, std::size_t n) {
        return std::vector<int>(n, kPad);
    };
    CHECK(accuracy_with(wrong, ds.test) == 0.0);
}

TEST_CASE("random weights score near chance on add") {
    const TaskDataset ds = generate(default_spec(TaskName::Add, 31));
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    const ModelWeights w = init_random(cfg, 99);
    const std::span<const Example> subset(ds.test.data(), 100);
    CHECK(accuracy(w, subset) <= 0.2);
}

TEST_CASE("accuracy is deterministic for frozen weights") {
    const TaskDataset ds = generate(default_spec(TaskName::Sort, 41));
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    const ModelWeights w = init_random(cfg, 123);
    const std::span<const Example> subset(ds.test.data(), 60);
    CHECK(accuracy(w, subset) == accuracy(w, subset));
}

TEST_CASE("export_jsonl emits one record per example") {
    TaskSpec spec = default_spec(TaskName::Add, 51);
    spec.example_count = 20;
    const TaskDataset ds = generate(spec);
    std::ostringstream out;
    export_jsonl(ds, out);
    const std::string text = out.str();
    std::size_t lines = 0;
    for (char c : text) lines += (c == '\n');
    CHECK(lines == 20);
    CHECK(text.find("\"task\":\"add\"") != std::string::npos);
    CHECK(text.find("\"split\":\"test\"") != std::string::npos);
}
