#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "circle/corpus.hpp"

using namespace circle;

namespace {
std::string temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "circle_corpus_tests";
    std::filesystem::create_directories(dir);
    return (dir / name).string();
}
}  // namespace

TEST_CASE("synthetic generation is deterministic under a fixed seed") {
    TaskDataset a = generate_synthetic_corpus(Lang::Python, 7, 3);
    TaskDataset b = generate_synthetic_corpus(Lang::Python, 7, 3);
    std::string pa = temp_path("det_a.jsonl"), pb = temp_path("det_b.jsonl");
    save_corpus(a, pa);
    save_corpus(b, pb);
    CHECK(read_file(pa) == read_file(pb));

    TaskDataset c = generate_synthetic_corpus(Lang::Python, 8, 3);
    std::string pc = temp_path("det_c.jsonl");
    save_corpus(c, pc);
    CHECK(read_file(pa) != read_file(pc));
}

TEST_CASE("every generated pair encodes a change and shares the task language") {
    for (Lang lang : kAllLangs) {
        TaskDataset ds = generate_synthetic_corpus(lang, 123, 200);
        REQUIRE(ds.size() == 200);
        std::set<std::string> ids;
        auto check_split = [&](const std::vector<BugFixPair>& pairs) {
            for (const auto& p : pairs) {
                CHECK(p.buggy != p.fixed);
                CHECK(p.lang == lang);
                CHECK(ids.insert(p.id).second);
            }
        };
        check_split(ds.train);
        check_split(ds.val);
        check_split(ds.test);
    }
}

TEST_CASE("the template bank includes the bfs loop and the flip that degenerates it") {
    // "while queue:" must exist as a fixed line, with "while True:" as a
    // reachable buggy variant.
    TaskDataset ds = generate_synthetic_corpus(Lang::Python, 21, 3000);
    bool found = false;
    auto scan = [&](const std::vector<BugFixPair>& pairs) {
        for (const auto& p : pairs)
            if (p.fixed == "while queue:" && p.buggy == "while True:") found = true;
    };
    scan(ds.train);
    scan(ds.val);
    scan(ds.test);
    CHECK(found);
}

TEST_CASE("splits are disjoint, stable, and roughly 80/10/10") {
    TaskDataset ds = generate_synthetic_corpus(Lang::Java, 5, 2000);
    CHECK(ds.train.size() + ds.val.size() + ds.test.size() == 2000);
    CHECK(ds.train.size() > 1400);
    CHECK(ds.val.size() > 100);
    CHECK(ds.test.size() > 100);
    for (const auto& p : ds.train) CHECK(split_of_id(p.id) == Split::Train);
    for (const auto& p : ds.val) CHECK(split_of_id(p.id) == Split::Val);
    for (const auto& p : ds.test) CHECK(split_of_id(p.id) == Split::Test);
}

TEST_CASE("load rejects malformed and invalid corpora with line numbers") {
    SECTION("empty file loads as an empty dataset") {
        std::string p = temp_path("empty.jsonl");
        write_file(p, "");
        TaskDataset ds = load_corpus(p);
        CHECK(ds.size() == 0);
    }
    SECTION("missing field names the line") {
        std::string p = temp_path("missing.jsonl");
        write_file(p,
                   R"({"id":"a","lang":"python","buggy":"x","context":"","fixed":"y"})"
                   "\n"
                   R"({"id":"b","lang":"python","buggy":"x","context":""})"
                   "\n");
        try {
            load_corpus(p);
            FAIL("expected a parse error");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find(":2") != std::string::npos);
            CHECK(std::string(e.what()).find("fixed") != std::string::npos);
        }
    }
    SECTION("duplicate ids are listed") {
        std::string p = temp_path("dup.jsonl");
        write_file(p,
                   R"({"id":"a","lang":"python","buggy":"x","context":"","fixed":"y"})"
                   "\n"
                   R"({"id":"a","lang":"python","buggy":"u","context":"","fixed":"v"})"
                   "\n");
        try {
            load_corpus(p);
            FAIL("expected a validation error");
        } catch (const ValidationError& e) {
            CHECK(std::string(e.what()).find("a") != std::string::npos);
        }
    }
    SECTION("buggy == fixed is rejected") {
        std::string p = temp_path("nochange.jsonl");
        write_file(p, R"({"id":"a","lang":"python","buggy":"x","context":"","fixed":"x"})"
                      "\n");
        CHECK_THROWS_AS(load_corpus(p), ValidationError);
    }
    SECTION("mixed languages are rejected") {
        std::string p = temp_path("mixed.jsonl");
        write_file(p,
                   R"({"id":"a","lang":"python","buggy":"x","context":"","fixed":"y"})"
                   "\n"
                   R"({"id":"b","lang":"java","buggy":"x","context":"","fixed":"y"})"
                   "\n");
        CHECK_THROWS_AS(load_corpus(p), ValidationError);
    }
}

TEST_CASE("save/load round-trips 100 random pairs byte for byte") {
    TaskDataset ds = generate_synthetic_corpus(Lang::C, 99, 100);
    std::string p1 = temp_path("rt1.jsonl"), p2 = temp_path("rt2.jsonl");
    save_corpus(ds, p1);
    TaskDataset loaded = load_corpus(p1);
    save_corpus(loaded, p2);
    CHECK(read_file(p1) == read_file(p2));

    // field ordering differences are tolerated on load
    std::string p3 = temp_path("rt3.jsonl");
    write_file(p3, R"({"fixed":"y","buggy":"x","id":"a","context":"","lang":"python"})"
                   "\n");
    TaskDataset permuted = load_corpus(p3);
    REQUIRE(permuted.size() == 1);
}

TEST_CASE("truncate_tokens keeps the head and is idempotent") {
    std::vector<int> ten(10, 1);
    CHECK(truncate_tokens(ten, 512) == ten);

    std::vector<int> long_ids(600);
    for (int i = 0; i < 600; ++i) long_ids[static_cast<std::size_t>(i)] = i;
    std::vector<int> cut = truncate_tokens(long_ids, 512);
    REQUIRE(cut.size() == 512);
    CHECK(cut.front() == 0);
    CHECK(cut.back() == 511);
    CHECK(truncate_tokens(cut, 512) == cut);

    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<int> ids(rng.next_below(50));
        for (auto& v : ids) v = static_cast<int>(rng.next_below(1000));
        std::size_t max_len = 1 + rng.next_below(40);
        auto out = truncate_tokens(ids, max_len);
        CHECK(out.size() <= ids.size());
        CHECK(out.size() <= max_len);
        CHECK(truncate_tokens(out, max_len) == out);
    }
    CHECK_THROWS_AS(truncate_tokens(ten, 0), ConfigError);
}
