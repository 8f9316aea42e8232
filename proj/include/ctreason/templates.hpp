#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctreason/curation.hpp"
#include "ctreason/data.hpp"

// Dialogue text shared by the synthetic generator, the engine and the CLI.
namespace ctreason::templates {

const std::vector<std::string>& organ_names();

/// Round-1 query paraphrases for one task, with "{organ}" placeholders.
const std::vector<std::string>& round1_queries(data::Task task);
/// Round-2 follow-up paraphrases.
const std::vector<std::string>& round2_queries();

std::string fill(const std::string& pattern, const std::string& organ);

/// "the {organ} appears {size} and {shape} in the {location} region" plus routing tokens.
std::string round1_answer(const std::string& organ, const curation::GeometryWords& g, data::Task task);
/// Contains exactly one [closer].
std::string round2_answer(const std::string& organ);

/// Picks a paraphrase index from a seed; stable across platforms.
std::size_t pick(std::uint64_t seed, std::size_t n);

/// Every word the templates can produce, so vocabularies built from it never see unknown tokens.
std::vector<std::string> corpus_inventory();

}  // namespace ctreason::templates
