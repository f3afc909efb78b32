#include <doctest.h>

#include <set>

#include "lloco/synth.hpp"

using namespace lloco;

TEST_CASE("filler text hits the requested size with a closed charset") {
    Rng rng(1);
    std::string text = filler_text(400, rng);
    CHECK(text.size() >= 400);
    CHECK(text.size() < 500);
    for (char c : text) {
        bool ok = (c >= 'a' && c <= 'z') || c == ' ' || c == '.';
        CHECK(ok);
    }
}

TEST_CASE("insert_at_depth lands on sentence boundaries") {
    Rng rng(2);
    std::string text = filler_text(300, rng);
    std::string fact = fact_sentence("anchor", "amber");

    std::string front = insert_at_depth(text, fact, 0.0);
    CHECK(front.substr(0, fact.size()) == fact);
    std::string back = insert_at_depth(text, fact, 1.0);
    CHECK(back.substr(back.size() - fact.size()) == fact);

    std::string mid = insert_at_depth(text, fact, 0.5);
    CHECK(mid.size() == text.size() + fact.size());
    size_t at = mid.find(fact);
    REQUIRE(at != std::string::npos);
    // the insertion point was a sentence boundary in the original text
    if (at != 0) CHECK(mid.substr(at - 2, 2) == ". ");
}

TEST_CASE("group generation plants disjoint keys with matching examples") {
    SynthGroup g = make_group("g0", 4, 4, 600, 2, 42);
    REQUIRE(g.docs.size() == 4);
    REQUIRE(g.examples.size() == 16);

    std::set<std::string> seen_keys;
    size_t ex_at = 0;
    for (const SynthDoc& doc : g.docs) {
        CHECK(doc.group_id == "g0");
        REQUIRE(doc.facts.size() == 4);
        for (const auto& [key, value] : doc.facts) {
            CHECK(seen_keys.insert(key).second); // never reused across docs
            // planted twice
            const std::string fact = fact_sentence(key, value);
            size_t first = doc.text.find(fact);
            REQUIRE(first != std::string::npos);
            CHECK(doc.text.find(fact, first + 1) != std::string::npos);

            const TrainingExample& ex = g.examples[ex_at++];
            CHECK(ex.group_id == "g0");
            CHECK(ex.doc_id == doc.doc_id);
            CHECK(ex.question == fact_question(key));
            CHECK(ex.answer == value + ".");
        }
    }

    SynthGroup again = make_group("g0", 4, 4, 600, 2, 42);
    for (size_t d = 0; d < g.docs.size(); ++d) CHECK(again.docs[d].text == g.docs[d].text);

    CHECK_THROWS_AS(make_group("g1", 5, 4, 600, 1, 1), config_error); // 20 keys > 16
}

TEST_CASE("pretraining corpus is deterministic and shaped") {
    auto docs = pretrain_corpus(6, 500, 9);
    REQUIRE(docs.size() == 6);
    for (const std::string& d : docs) CHECK(d.size() >= 500);
    auto again = pretrain_corpus(6, 500, 9);
    CHECK(docs == again);
    auto other = pretrain_corpus(6, 500, 10);
    CHECK(docs != other);
}

TEST_CASE("needle sentence and question wording") {
    CHECK(needle_sentence("avalon") == "the secret city is avalon. ");
    CHECK(needle_question() == "what is the secret city?");
    CHECK(needle_cities().size() == 10);
}

TEST_CASE("random city words avoid both city lists") {
    Rng rng(77);
    std::set<std::string> seen;
    for (int i = 0; i < 200; ++i) {
        std::string w = random_city_word(rng);
        CHECK(w.size() >= 5);
        CHECK(w.size() <= 8);
        for (char c : w) CHECK((c >= 'a' && c <= 'z'));
        for (const std::string& c : needle_cities()) CHECK(w != c);
        for (const std::string& c : heldout_cities()) CHECK(w != c);
        seen.insert(w);
    }
    CHECK(seen.size() > 150); // overwhelmingly distinct draws

    Rng a(5), b(5);
    CHECK(random_city_word(a) == random_city_word(b)); // state-deterministic
}

TEST_CASE("needle pretraining docs plant the pattern and reproduce") {
    auto docs = needle_pretrain_docs(12, 31);
    REQUIRE(docs.size() == 12);
    for (const std::string& d : docs) {
        CHECK(d.size() >= 130);
        CHECK(d.find("the secret city is ") != std::string::npos);
    }
    CHECK(needle_pretrain_docs(12, 31) == docs);
    CHECK(needle_pretrain_docs(12, 32) != docs);
    CHECK(needle_pretrain_docs(0, 31).empty());
}
