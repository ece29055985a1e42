#include "ttq/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "ttq/errors.hpp"

namespace ttq::data {

namespace {

std::size_t uniform(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

void check_examples(std::span<const Example> examples, const Dataset& ds, const char* split) {
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    const std::string where = std::string(split) + " example " + std::to_string(i);
    if (ex.tokens.empty()) throw DataError(where + ": no tokens");
    if (ex.tokens.size() != ex.slots.size()) throw DataError(where + ": slot and token counts differ");
    if (ex.intent >= ds.num_intents) throw DataError(where + ": intent out of range");
    for (std::size_t t : ex.tokens)
      if (t >= ds.vocab_size) throw DataError(where + ": token " + std::to_string(t) + " outside vocabulary");
    for (std::size_t s : ex.slots)
      if (s >= ds.num_slots) throw DataError(where + ": slot label out of range");
  }
}

/// Token pool boundaries inside [1, vocab).
struct Vocabulary {
  std::vector<std::vector<std::size_t>> keywords;  // per intent
  std::vector<std::vector<std::size_t>> values;    // per slot type (index 0 unused)
  std::vector<std::size_t> filler;
};

Vocabulary partition(const SyntheticSpec& spec) {
  const std::size_t usable = spec.vocab_size - 1;
  const std::size_t slot_types = spec.num_slots - 1;
  Vocabulary v;
  v.keywords.resize(spec.num_intents);
  v.values.resize(spec.num_slots);
  // Roughly 40% keywords, 30% slot values, the remainder filler; wraps around when the
  // vocabulary is too small for disjoint pools.
  const std::size_t per_intent = std::max<std::size_t>(1, usable * 2 / 5 / spec.num_intents);
  const std::size_t per_slot = slot_types ? std::max<std::size_t>(1, usable * 3 / 10 / slot_types) : 0;
  std::size_t next = 0;
  auto take = [&] { return 1 + (next++ % usable); };
  for (auto& k : v.keywords)
    for (std::size_t j = 0; j < per_intent; ++j) k.push_back(take());
  for (std::size_t s = 1; s < spec.num_slots; ++s)
    for (std::size_t j = 0; j < per_slot; ++j) v.values[s].push_back(take());
  while (next < usable) v.filler.push_back(take());
  if (v.filler.empty()) v.filler.push_back(take());
  return v;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (vocab_size < 2) throw ConfigError("synthetic vocab_size must be at least 2 (token 0 is reserved)");
  if (num_intents == 0 || num_slots == 0 || num_examples == 0) throw ConfigError("synthetic sizes must be >= 1");
  if (min_len == 0 || max_len < min_len) throw ConfigError("synthetic lengths need 1 <= min_len <= max_len");
}

void Dataset::validate() const {
  if (vocab_size == 0 || num_intents == 0 || num_slots == 0) throw DataError("dataset sizes must be positive");
  check_examples(train, *this, "train");
  check_examples(dev, *this, "dev");
  check_examples(test, *this, "test");
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const Vocabulary vocab = partition(spec);
  std::mt19937_64 rng(spec.seed);
  const std::size_t slot_types = spec.num_slots - 1;

  std::vector<Example> all;
  all.reserve(spec.num_examples);
  for (std::size_t n = 0; n < spec.num_examples; ++n) {
    Example ex;
    ex.intent = uniform(rng, 0, spec.num_intents - 1);
    const std::size_t len = uniform(rng, spec.min_len, spec.max_len);
    ex.tokens.resize(len);
    ex.slots.assign(len, 0);
    for (auto& t : ex.tokens) t = vocab.filler[uniform(rng, 0, vocab.filler.size() - 1)];

    std::vector<std::size_t> free(len);
    for (std::size_t i = 0; i < len; ++i) free[i] = i;
    std::shuffle(free.begin(), free.end(), rng);
    auto pop = [&] {
      const std::size_t p = free.back();
      free.pop_back();
      return p;
    };

    const auto& kw = vocab.keywords[ex.intent];
    const std::size_t keywords = std::min<std::size_t>(uniform(rng, 1, 2), free.size());
    for (std::size_t k = 0; k < keywords; ++k) ex.tokens[pop()] = kw[uniform(rng, 0, kw.size() - 1)];

    if (slot_types > 0) {
      const std::size_t spans = uniform(rng, 0, 2);
      for (std::size_t s = 0; s < spans && !free.empty(); ++s) {
        const std::size_t preferred = 1 + (ex.intent + s) % slot_types;
        const std::size_t type = uniform(rng, 0, 9) < 7 ? preferred : uniform(rng, 1, slot_types);
        const auto& pool = vocab.values[type];
        // Span of one or two tokens starting at a free position; the second token only if its
        // position is free too.
        const std::size_t start = pop();
        ex.tokens[start] = pool[uniform(rng, 0, pool.size() - 1)];
        ex.slots[start] = type;
        if (uniform(rng, 0, 1) == 1) {
          auto it = std::find(free.begin(), free.end(), start + 1);
          if (it != free.end()) {
            free.erase(it);
            ex.tokens[start + 1] = pool[uniform(rng, 0, pool.size() - 1)];
            ex.slots[start + 1] = type;
          }
        }
      }
    }
    all.push_back(std::move(ex));
  }

  Dataset ds;
  ds.vocab_size = spec.vocab_size;
  ds.num_intents = spec.num_intents;
  ds.num_slots = spec.num_slots;
  std::vector<std::vector<std::size_t>> by_intent(spec.num_intents);
  for (std::size_t i = 0; i < all.size(); ++i) by_intent[all[i].intent].push_back(i);
  for (auto& group : by_intent) {
    std::shuffle(group.begin(), group.end(), rng);
    const std::size_t n = group.size();
    const std::size_t n_dev = (n + 5) / 10;
    const std::size_t n_test = (n + 5) / 10;
    const std::size_t n_train = n - std::min(n, n_dev + n_test);
    for (std::size_t j = 0; j < n; ++j) {
      auto& dst = j < n_train ? ds.train : (j < n_train + n_dev ? ds.dev : ds.test);
      dst.push_back(all[group[j]]);
    }
  }
  for (auto* split : {&ds.train, &ds.dev, &ds.test}) std::shuffle(split->begin(), split->end(), rng);
  return ds;
}

std::string format_example(const Example& ex) {
  std::ostringstream os;
  os << ex.intent << '\t';
  for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
    if (i) os << ' ';
    os << ex.tokens[i] << ':' << ex.slots[i];
  }
  return os.str();
}

Example parse_example(const std::string& line, const std::string& where) {
  const auto tab = line.find('\t');
  if (tab == std::string::npos) throw DataError(where + ": missing tab after intent id");
  Example ex;
  auto parse_id = [&](const std::string& s) -> std::size_t {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
      throw DataError(where + ": expected a non-negative integer, got '" + s + "'");
    try {
      return static_cast<std::size_t>(std::stoull(s));
    } catch (const std::exception&) {
      throw DataError(where + ": integer out of range '" + s + "'");
    }
  };
  ex.intent = parse_id(line.substr(0, tab));
  std::istringstream is(line.substr(tab + 1));
  std::string item;
  while (is >> item) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw DataError(where + ": token '" + item + "' lacks ':slot'");
    ex.tokens.push_back(parse_id(item.substr(0, colon)));
    ex.slots.push_back(parse_id(item.substr(colon + 1)));
  }
  if (ex.tokens.empty()) throw DataError(where + ": no tokens");
  return ex;
}

std::vector<Example> read_examples(std::istream& in, const std::string& name) {
  std::vector<Example> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    out.push_back(parse_example(line, name + ":" + std::to_string(lineno)));
  }
  return out;
}

std::vector<Example> read_examples(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return read_examples(in, path.string());
}

void write_examples(std::ostream& out, std::span<const Example> examples) {
  for (const auto& ex : examples) out << format_example(ex) << '\n';
}

void write_dataset(const Dataset& ds, const std::filesystem::path& dir, const SyntheticSpec* spec) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  auto write = [&](const char* name, std::span<const Example> ex) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / name).string());
    write_examples(out, ex);
  };
  write("train.txt", ds.train);
  write("dev.txt", ds.dev);
  write("test.txt", ds.test);
  nlohmann::ordered_json meta;
  meta["format"] = "intent_id<TAB>token_id:slot_id ...";
  meta["vocab_size"] = ds.vocab_size;
  meta["num_intents"] = ds.num_intents;
  meta["num_slots"] = ds.num_slots;
  meta["splits"] = {{"train", ds.train.size()}, {"dev", ds.dev.size()}, {"test", ds.test.size()}};
  if (spec) {
    meta["generator"] = {{"seed", spec->seed},         {"num_examples", spec->num_examples},
                         {"min_len", spec->min_len},   {"max_len", spec->max_len}};
  }
  std::ofstream out(dir / "meta.json", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "meta.json").string());
  out << meta.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw IoError("cannot open " + (dir / "meta.json").string());
  Dataset ds;
  try {
    const auto meta = nlohmann::json::parse(in);
    ds.vocab_size = meta.at("vocab_size").get<std::size_t>();
    ds.num_intents = meta.at("num_intents").get<std::size_t>();
    ds.num_slots = meta.at("num_slots").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / "meta.json").string() + ": " + e.what());
  }
  ds.train = read_examples(dir / "train.txt");
  ds.dev = read_examples(dir / "dev.txt");
  ds.test = read_examples(dir / "test.txt");
  ds.validate();
  return ds;
}

std::vector<std::vector<std::size_t>> token_sequences(std::span<const Example> examples, std::size_t limit) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < examples.size() && i < limit; ++i) out.push_back(examples[i].tokens);
  return out;
}

}  // namespace ttq::data
