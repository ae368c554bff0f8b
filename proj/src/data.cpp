#include "advlab/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "advlab/tensor.hpp"
#include "json.hpp"

namespace advlab {

namespace {
const std::string kPadTok = "<pad>";
const std::string kUnkTok = "<unk>";
const std::string kClsTok = "<cls>";
}  // namespace

Vocab::Vocab() {
  id_to_token_ = {kPadTok, kUnkTok, kClsTok};
  for (std::size_t i = 0; i < id_to_token_.size(); ++i)
    token_to_id_[id_to_token_[i]] = static_cast<std::int32_t>(i);
}

std::int32_t Vocab::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
    throw std::invalid_argument("Vocab::token: id out of range");
  return id_to_token_[static_cast<std::size_t>(id)];
}

void Vocab::add(const std::string& token) {
  if (token == kPadTok || token == kUnkTok || token == kClsTok)
    throw std::invalid_argument("Vocab::add: reserved token " + token);
  if (token_to_id_.count(token)) return;
  token_to_id_[token] = static_cast<std::int32_t>(id_to_token_.size());
  id_to_token_.push_back(token);
}

std::string Vocab::to_json() const {
  nlohmann::json tokens = nlohmann::json::object();
  for (std::size_t i = 0; i < id_to_token_.size(); ++i)
    tokens[id_to_token_[i]] = static_cast<std::int32_t>(i);
  nlohmann::json j;
  j["format"] = "advlab-vocab";
  j["tokens"] = tokens;
  return j.dump(2) + "\n";
}

Vocab Vocab::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  if (!j.contains("tokens")) throw std::runtime_error("vocab json: missing tokens");
  std::map<std::int32_t, std::string> by_id;
  for (auto& [tok, id] : j["tokens"].items()) by_id[id.get<std::int32_t>()] = tok;
  Vocab v;
  for (auto& [id, tok] : by_id) {
    if (id <= kCls) continue;  // reserved ids are implicit
    if (id != static_cast<std::int32_t>(v.id_to_token_.size()))
      throw std::runtime_error("vocab json: ids are not dense");
    v.token_to_id_[tok] = id;
    v.id_to_token_.push_back(tok);
  }
  return v;
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << to_json();
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) tokens.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

Vocab build_vocab(const LabeledCorpus& corpus, std::size_t min_count) {
  if (corpus.examples.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& ex : corpus.examples)
    for (const auto& tok : tokenize(ex.text)) ++counts[tok];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : counts)
    if (n >= min_count) kept.emplace_back(tok, n);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocab v;
  for (auto& [tok, n] : kept) v.add(tok);
  return v;
}

EncodedData encode(const LabeledCorpus& corpus, const Vocab& vocab, std::size_t max_len) {
  if (max_len < 1) throw std::invalid_argument("encode: max_len must be >= 1");
  EncodedData d;
  d.count = corpus.examples.size();
  d.seq_len = max_len;
  d.classes = corpus.classes;
  d.ids.assign(d.count * max_len, Vocab::kPad);
  d.mask.assign(d.count * max_len, 0);
  d.labels.resize(d.count);
  for (std::size_t i = 0; i < d.count; ++i) {
    const auto& ex = corpus.examples[i];
    d.labels[i] = ex.label;
    std::int32_t* row = d.ids.data() + i * max_len;
    std::uint8_t* msk = d.mask.data() + i * max_len;
    row[0] = Vocab::kCls;
    msk[0] = 1;
    std::size_t pos = 1;
    for (const auto& tok : tokenize(ex.text)) {
      if (pos >= max_len) break;
      row[pos] = vocab.id(tok);
      msk[pos] = 1;
      ++pos;
    }
  }
  return d;
}

EncodedData EncodedData::subset(const std::vector<std::size_t>& rows) const {
  EncodedData d;
  d.count = rows.size();
  d.seq_len = seq_len;
  d.classes = classes;
  d.ids.reserve(d.count * seq_len);
  d.mask.reserve(d.count * seq_len);
  d.labels.reserve(d.count);
  for (std::size_t r : rows) {
    d.ids.insert(d.ids.end(), row_ids(r), row_ids(r) + seq_len);
    d.mask.insert(d.mask.end(), row_mask(r), row_mask(r) + seq_len);
    d.labels.push_back(labels[r]);
  }
  return d;
}

std::vector<std::string> decode(const std::int32_t* ids, std::size_t len, const Vocab& vocab) {
  std::vector<std::string> toks;
  for (std::size_t i = 0; i < len; ++i) {
    if (ids[i] == Vocab::kPad || ids[i] == Vocab::kCls) continue;
    toks.push_back(vocab.token(ids[i]));
  }
  return toks;
}

namespace {

std::string synth_token(std::size_t i) { return "tok" + std::to_string(i); }

// Designated trigger tokens; tok1/tok2 always exist since vocab_size >= 3.
constexpr std::size_t kTriggerA = 1;
constexpr std::size_t kTriggerB = 2;

bool has_bigram(const std::vector<std::size_t>& seq) {
  for (std::size_t i = 0; i + 1 < seq.size(); ++i)
    if (seq[i] == kTriggerA && seq[i + 1] == kTriggerB) return true;
  return false;
}

// Negatives avoid not only the bigram but any co-occurrence of the two
// trigger tokens, so token presence already separates the classes (and a
// bag-of-words linear model certifies the task).
void strip_trigger(std::vector<std::size_t>& seq, std::size_t vocab_size, RngState& rng) {
  bool has_a = false, has_b = false;
  for (std::size_t t : seq) {
    has_a = has_a || t == kTriggerA;
    has_b = has_b || t == kTriggerB;
  }
  if (!(has_a && has_b)) return;
  for (auto& t : seq) {
    if (t != kTriggerB) continue;
    std::size_t repl;
    do {
      repl = rng.uniform_index(vocab_size);
    } while (repl == kTriggerA || repl == kTriggerB);
    t = repl;
  }
}

std::string join_tokens(const std::vector<std::size_t>& seq) {
  std::string text;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) text += ' ';
    text += synth_token(seq[i]);
  }
  return text;
}

}  // namespace

LabeledCorpus gen_synthetic(const SyntheticSpec& spec) {
  if (spec.size == 0) throw std::invalid_argument("gen_synthetic: size must be > 0");
  if (spec.vocab_size < 3) throw std::invalid_argument("gen_synthetic: vocab_size must be >= 3");
  if (spec.task == SyntheticTask::trigger_bigram && spec.seq_len < 2)
    throw std::invalid_argument("gen_synthetic: bigram task needs seq_len >= 2");
  if (spec.seq_len < 1) throw std::invalid_argument("gen_synthetic: seq_len must be >= 1");
  if (spec.noise_rate < 0.0 || spec.noise_rate > 1.0)
    throw std::invalid_argument("gen_synthetic: noise_rate must be in [0,1]");

  RngState rng(spec.seed);
  LabeledCorpus corpus;
  corpus.classes = 2;
  corpus.examples.reserve(spec.size);

  for (std::size_t n = 0; n < spec.size; ++n) {
    const std::int32_t want = static_cast<std::int32_t>(n % 2);  // balanced by construction
    std::vector<std::size_t> seq(spec.seq_len);
    for (auto& t : seq) t = rng.uniform_index(spec.vocab_size);

    if (spec.task == SyntheticTask::trigger_bigram) {
      if (want == 1) {
        const std::size_t pos = rng.uniform_index(spec.seq_len - 1);
        seq[pos] = kTriggerA;
        seq[pos + 1] = kTriggerB;
      } else {
        strip_trigger(seq, spec.vocab_size, rng);
      }
    } else {
      std::size_t count = 0;
      for (std::size_t t : seq) count += (t == kTriggerA);
      if (static_cast<std::int32_t>(count % 2) != want) {
        // Flip parity with a single replacement.
        const std::size_t pos = rng.uniform_index(spec.seq_len);
        if (seq[pos] == kTriggerA) {
          std::size_t repl;
          do {
            repl = rng.uniform_index(spec.vocab_size);
          } while (repl == kTriggerA);
          seq[pos] = repl;
        } else {
          bool replaced = false;
          for (std::size_t i = 0; i < spec.seq_len && !replaced; ++i) {
            const std::size_t j = (pos + i) % spec.seq_len;
            if (seq[j] != kTriggerA) {
              seq[j] = kTriggerA;
              replaced = true;
            }
          }
          if (!replaced) seq[pos] = 0;  // all positions were triggers; drop one
        }
      }
    }
    corpus.examples.push_back({want, join_tokens(seq)});
  }

  // Flip the requested fraction of labels.
  const std::size_t flips =
      static_cast<std::size_t>(spec.noise_rate * static_cast<double>(spec.size) + 0.5);
  if (flips > 0) {
    std::vector<std::size_t> idx(spec.size);
    for (std::size_t i = 0; i < spec.size; ++i) idx[i] = i;
    for (std::size_t i = 0; i < flips; ++i) {
      const std::size_t j = i + rng.uniform_index(spec.size - i);
      std::swap(idx[i], idx[j]);
    }
    for (std::size_t i = 0; i < flips; ++i)
      corpus.examples[idx[i]].label = 1 - corpus.examples[idx[i]].label;
  }

  // Shuffle example order so splits and minibatches mix both classes.
  for (std::size_t i = spec.size; i-- > 1;) {
    const std::size_t j = rng.uniform_index(i + 1);
    std::swap(corpus.examples[i], corpus.examples[j]);
  }
  return corpus;
}

LabeledCorpus load_tsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  LabeledCorpus corpus;
  std::string line;
  std::size_t lineno = 0;
  std::int32_t max_label = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected label<TAB>text");
    std::int32_t label;
    try {
      label = std::stoi(line.substr(0, tab));
    } catch (const std::exception&) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad label");
    }
    std::string text = line.substr(tab + 1);
    if (label < 0) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad label");
    if (text.empty())
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": empty text");
    max_label = std::max(max_label, label);
    corpus.examples.push_back({label, std::move(text)});
  }
  if (corpus.examples.empty()) throw std::runtime_error(path + ": no examples");
  corpus.classes = max_label + 1;
  return corpus;
}

void save_tsv(const LabeledCorpus& corpus, const std::string& path,
              const std::string& header_comment) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  if (!header_comment.empty()) out << "# " << header_comment << "\n";
  for (const auto& ex : corpus.examples) out << ex.label << '\t' << ex.text << '\n';
}

}  // namespace advlab
