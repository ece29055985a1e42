#pragma once

// Intent/slot corpora. Line format (UTF-8, one example per line):
//
//   <intent_id> \t <token_id>:<slot_id> <token_id>:<slot_id> ...
//
// Slot 0 is the outside label and token 0 is reserved. A dataset directory holds train.txt,
// dev.txt, test.txt and meta.json ({vocab_size, num_intents, num_slots, ...}).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace ttq::data {

struct Example {
  std::size_t intent = 0;
  std::vector<std::size_t> tokens;
  std::vector<std::size_t> slots;

  bool operator==(const Example&) const = default;
};

struct Dataset {
  std::size_t vocab_size = 0;
  std::size_t num_intents = 0;
  std::size_t num_slots = 0;
  std::vector<Example> train;
  std::vector<Example> dev;
  std::vector<Example> test;

  /// Throws DataError when ids or labels fall outside the declared sizes.
  void validate() const;
};

struct SyntheticSpec {
  std::uint64_t seed = 7;
  std::size_t vocab_size = 64;
  std::size_t num_intents = 4;
  std::size_t num_slots = 4;
  std::size_t num_examples = 2000;
  std::size_t min_len = 4;
  std::size_t max_len = 12;

  void validate() const;
};

/// Each intent owns a few keyword tokens and each slot type a few value tokens; the rest of
/// the vocabulary is filler. An example carries one or two keywords of its intent and up to
/// two slot spans, with slot types correlated with the intent. The split is stratified by
/// intent, 80/10/10.
Dataset generate_synthetic(const SyntheticSpec& spec);

std::string format_example(const Example& ex);
/// `where` names the source in error messages.
Example parse_example(const std::string& line, const std::string& where);

std::vector<Example> read_examples(std::istream& in, const std::string& name);
std::vector<Example> read_examples(const std::filesystem::path& path);
void write_examples(std::ostream& out, std::span<const Example> examples);

void write_dataset(const Dataset& ds, const std::filesystem::path& dir, const SyntheticSpec* spec = nullptr);
Dataset load_dataset(const std::filesystem::path& dir);

std::vector<std::vector<std::size_t>> token_sequences(std::span<const Example> examples, std::size_t limit = SIZE_MAX);

}  // namespace ttq::data
