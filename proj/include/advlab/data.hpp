#pragma once

// Tokenization, corpus ingestion and seeded synthetic-task generation.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace advlab {

/// Token-to-id map with reserved ids PAD=0, UNK=1, CLS=2. Ids are dense
/// and stable: frequency-descending, ties broken lexicographically.
class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  static constexpr std::int32_t kCls = 2;

  Vocab();

  std::int32_t id(const std::string& token) const;  // UNK for out-of-vocab
  const std::string& token(std::int32_t id) const;
  std::size_t size() const { return id_to_token_.size(); }

  void add(const std::string& token);  // next free id; reserved names rejected

  std::string to_json() const;
  static Vocab from_json(const std::string& text);
  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

 private:
  std::unordered_map<std::string, std::int32_t> token_to_id_;
  std::vector<std::string> id_to_token_;
};

struct LabeledExample {
  std::int32_t label;
  std::string text;
};

struct LabeledCorpus {
  std::vector<LabeledExample> examples;
  std::int32_t classes = 0;
  std::string split;  // train / dev / test
};

/// Lowercased whitespace tokens.
std::vector<std::string> tokenize(const std::string& text);

Vocab build_vocab(const LabeledCorpus& corpus, std::size_t min_count);

/// Fixed-length encoded dataset: [CLS] + token ids, truncated to max_len,
/// PAD-filled; mask is 1 on CLS and real tokens.
struct EncodedData {
  std::size_t count = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> ids;     // count * seq_len, row-major
  std::vector<std::uint8_t> mask;    // count * seq_len
  std::vector<std::int32_t> labels;  // count
  std::int32_t classes = 0;

  const std::int32_t* row_ids(std::size_t i) const { return ids.data() + i * seq_len; }
  const std::uint8_t* row_mask(std::size_t i) const { return mask.data() + i * seq_len; }
  /// Dataset restricted to the given rows, in order.
  EncodedData subset(const std::vector<std::size_t>& rows) const;
};

EncodedData encode(const LabeledCorpus& corpus, const Vocab& vocab, std::size_t max_len);

/// Tokens of one encoded row with CLS/PAD stripped (UNK kept as its token).
std::vector<std::string> decode(const std::int32_t* ids, std::size_t len, const Vocab& vocab);

enum class SyntheticTask { trigger_bigram, parity_of_token };

struct SyntheticSpec {
  SyntheticTask task = SyntheticTask::trigger_bigram;
  std::size_t size = 1000;
  std::size_t seq_len = 8;       // tokens per text
  std::size_t vocab_size = 20;   // distinct synthetic tokens
  double noise_rate = 0.0;       // fraction of labels flipped
  std::uint64_t seed = 0;
};

/// Class-balanced two-class corpus, fully determined by the spec.
/// trigger_bigram: label 1 iff the designated bigram (tok1 tok2) occurs.
/// parity_of_token: label = parity of occurrences of tok1.
LabeledCorpus gen_synthetic(const SyntheticSpec& spec);

LabeledCorpus load_tsv(const std::string& path);
/// TSV `label<TAB>text`; a comment header line records provenance.
void save_tsv(const LabeledCorpus& corpus, const std::string& path,
              const std::string& header_comment = "");

}  // namespace advlab
