#include "lloco/synth.hpp"

#include <algorithm>

namespace lloco {

const std::vector<std::string>& synth_keys() {
    static const std::vector<std::string> keys = {
        "anchor", "basil",   "cobalt",  "dune",   "ember",  "falcon", "garnet", "harbor",
        "iris",   "juniper", "kestrel", "lagoon", "meadow", "nectar", "onyx",   "prism"};
    return keys;
}

const std::vector<std::string>& synth_values() {
    static const std::vector<std::string> values = {"amber", "breeze", "cinder", "delta",
                                                    "fjord", "grove",  "heron",  "ivory"};
    return values;
}

const std::vector<std::string>& needle_cities() {
    static const std::vector<std::string> cities = {"avalon", "brindle", "calder", "dorset",
                                                    "elmora", "fenwick", "galway", "hollis",
                                                    "istria", "juneau"};
    return cities;
}

const std::vector<std::string>& heldout_cities() {
    static const std::vector<std::string> cities = {"keldane", "lumet",  "marrow", "nivelle",
                                                    "ostler",  "pindar", "quista", "rovane"};
    return cities;
}

namespace {

const std::vector<std::string>& filler_words() {
    static const std::vector<std::string> words = {
        "the",   "old",   "river", "turns", "quiet", "under", "a",     "pale",
        "sky",   "wind",  "moves", "over",  "low",   "hills", "and",   "light",
        "rain",  "falls", "on",    "stone", "paths", "near",  "tall",  "grass",
        "birds", "drift", "past",  "slow",  "water", "while", "small", "boats"};
    return words;
}

} // namespace

std::string filler_text(int approx_bytes, Rng& rng) {
    const auto& words = filler_words();
    std::string out;
    while (static_cast<int>(out.size()) < approx_bytes) {
        int len = 4 + int(rng.below(5));
        for (int w = 0; w < len; ++w) {
            out += words[rng.below(words.size())];
            out += ' ';
        }
        out.back() = '.';
        out += ' ';
    }
    return out;
}

std::string fact_sentence(const std::string& key, const std::string& value) {
    return "the " + key + " is " + value + ". ";
}

std::string fact_question(const std::string& key) { return "what is the " + key + "?"; }

std::string needle_sentence(const std::string& city) {
    return "the secret city is " + city + ". ";
}

std::string needle_question() { return "what is the secret city?"; }

std::string insert_at_depth(const std::string& text, const std::string& sentence, double depth) {
    depth = std::clamp(depth, 0.0, 1.0);
    // candidate positions: after each ". " boundary, plus both ends
    std::vector<size_t> cuts = {0};
    for (size_t at = text.find(". "); at != std::string::npos; at = text.find(". ", at + 1))
        cuts.push_back(at + 2);
    cuts.push_back(text.size());
    const double want = depth * double(text.size());
    size_t best = cuts[0];
    for (size_t c : cuts)
        if (std::abs(double(c) - want) < std::abs(double(best) - want)) best = c;
    return text.substr(0, best) + sentence + text.substr(best);
}

SynthGroup make_group(const std::string& group_id, int n_docs, int keys_per_doc,
                      int approx_doc_bytes, int fact_repeats, uint64_t seed) {
    if (n_docs < 1 || keys_per_doc < 1 || fact_repeats < 1)
        throw config_error("group needs at least one doc, key, and repeat");
    if (size_t(n_docs) * keys_per_doc > synth_keys().size())
        throw config_error("not enough distinct keys for " + std::to_string(n_docs) + " docs x " +
                           std::to_string(keys_per_doc));

    Rng pick(derive_seed(seed, "group." + group_id));
    std::vector<std::string> keys = synth_keys();
    // Fisher-Yates under our own rng so the assignment is seed-stable
    for (size_t i = keys.size(); i > 1; --i)
        std::swap(keys[i - 1], keys[pick.below(i)]);

    SynthGroup group;
    group.group_id = group_id;
    int key_at = 0;
    for (int d = 0; d < n_docs; ++d) {
        SynthDoc doc;
        doc.doc_id = group_id + "-d" + std::to_string(d);
        doc.group_id = group_id;
        Rng rng(derive_seed(seed, "doc." + doc.doc_id));
        doc.text = filler_text(approx_doc_bytes, rng);
        for (int f = 0; f < keys_per_doc; ++f) {
            const std::string& key = keys[key_at++];
            const std::string& value = synth_values()[rng.below(synth_values().size())];
            doc.facts.emplace_back(key, value);
            for (int rep = 0; rep < fact_repeats; ++rep)
                doc.text = insert_at_depth(doc.text, fact_sentence(key, value), rng.uniform());
            TrainingExample ex;
            ex.group_id = group_id;
            ex.doc_id = doc.doc_id;
            ex.question = fact_question(key);
            ex.answer = value + ".";
            group.examples.push_back(std::move(ex));
        }
        group.docs.push_back(std::move(doc));
    }
    return group;
}

std::vector<std::string> pretrain_corpus(int n_docs, int approx_bytes, uint64_t seed) {
    std::vector<std::string> docs;
    docs.reserve(n_docs);
    for (int d = 0; d < n_docs; ++d) {
        Rng rng(derive_seed(seed, "pretrain." + std::to_string(d)));
        std::string text = filler_text(approx_bytes, rng);
        // sprinkle the fact pattern so its surface form is familiar
        int facts = 2 + int(rng.below(3));
        for (int f = 0; f < facts; ++f) {
            const std::string& key = synth_keys()[rng.below(synth_keys().size())];
            const std::string& value = synth_values()[rng.below(synth_values().size())];
            text = insert_at_depth(text, fact_sentence(key, value), rng.uniform());
        }
        docs.push_back(std::move(text));
    }
    return docs;
}

std::string random_city_word(Rng& rng) {
    auto in = [](const std::vector<std::string>& list, const std::string& w) {
        for (const std::string& x : list)
            if (x == w) return true;
        return false;
    };
    for (;;) {
        std::string w;
        const int len = 5 + int(rng.below(4));
        for (int i = 0; i < len; ++i) w.push_back(char('a' + rng.below(26)));
        if (!in(needle_cities(), w) && !in(heldout_cities(), w)) return w;
    }
}

std::vector<std::string> needle_pretrain_docs(int n_docs, uint64_t seed) {
    std::vector<std::string> docs;
    docs.reserve(n_docs);
    for (int d = 0; d < n_docs; ++d) {
        Rng rng(derive_seed(seed, "needledoc." + std::to_string(d)));
        const int len = 130 + int(rng.below(171));
        std::string text = filler_text(len, rng);
        const int plants = 1 + int(rng.below(2));
        for (int p = 0; p < plants; ++p)
            text = insert_at_depth(text, needle_sentence(random_city_word(rng)), rng.uniform());
        docs.push_back(std::move(text));
    }
    return docs;
}

} // namespace lloco
