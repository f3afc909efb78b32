#pragma once

#include <string>
#include <vector>

#include "lloco/common.hpp"
#include "lloco/trainer.hpp"

namespace lloco {

// ---------------------------------------------------------------------------
// synthetic key-value corpus: filler prose with planted fact sentences, plus
// QA pairs asking for the planted values
// ---------------------------------------------------------------------------

const std::vector<std::string>& synth_keys();   // 16 distinct subjects
const std::vector<std::string>& synth_values(); // 8 short answers
const std::vector<std::string>& needle_cities();
// disjoint from needle_cities(); never planted in training corpora, so
// random-city needle grids probe copying rather than recall
const std::vector<std::string>& heldout_cities();

struct SynthDoc {
    std::string doc_id;
    std::string group_id;
    std::string text;
    std::vector<std::pair<std::string, std::string>> facts; // key -> value
};

struct SynthGroup {
    std::string group_id;
    std::vector<SynthDoc> docs;
    std::vector<TrainingExample> examples; // one per planted fact
};

// lowercase filler prose of roughly the requested byte length
std::string filler_text(int approx_bytes, Rng& rng);

std::string fact_sentence(const std::string& key, const std::string& value);
std::string fact_question(const std::string& key); // "what is the <key>?"

// keys are split disjointly across the group's docs so every question has a
// single in-group answer; facts repeat `fact_repeats` times at random spots
SynthGroup make_group(const std::string& group_id, int n_docs, int keys_per_doc,
                      int approx_doc_bytes, int fact_repeats, uint64_t seed);

// plain filler+fact documents without any QA formatting, for base pretraining
std::vector<std::string> pretrain_corpus(int n_docs, int approx_bytes, uint64_t seed);

// needle-in-a-haystack: one planted sentence at a controlled depth
std::string needle_sentence(const std::string& city);
std::string needle_question();
// inserts at the sentence boundary nearest to depth (0 = front, 1 = back)
std::string insert_at_depth(const std::string& text, const std::string& sentence, double depth);

// a random lowercase word of 5-8 letters, rerolled until it collides with
// neither city list; keeps generated copy targets unmemorizable
std::string random_city_word(Rng& rng);

// short filler docs (1-2 chunks at the toy chunk length) each planting one or
// two needle sentences built on random_city_word; mixing these into the
// pretraining corpus forces reconstruction to copy arbitrary bytes out of the
// summaries instead of recalling the closed filler vocabulary
std::vector<std::string> needle_pretrain_docs(int n_docs, uint64_t seed);

} // namespace lloco
