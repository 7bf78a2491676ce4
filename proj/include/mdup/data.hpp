#pragma once

// Synthetic corpora: a seeded order-2 Markov text language, a text-to-speech
// code table, ASR-style batch assembly and a binary corpus format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdup/model.hpp"

namespace mdup::data {

using Sequence = std::vector<std::int32_t>;

// The last two text ids are reserved: SEP separates speech from transcript,
// EOS closes the transcript. Generated text never contains either.
inline std::int32_t sep_id(std::size_t vocab_text) { return static_cast<std::int32_t>(vocab_text) - 2; }
inline std::int32_t eos_id(std::size_t vocab_text) { return static_cast<std::int32_t>(vocab_text) - 1; }

struct SyntheticTextSpec {
    std::size_t vocab_text = 256;
    std::size_t min_len = 16;
    std::size_t max_len = 64;
    // Next-token mixture: order-2 candidates, order-1 candidates, Zipf unigram.
    std::size_t order2_candidates = 2;
    std::size_t order1_candidates = 4;
    double p_order2 = 0.35;
    double p_order1 = 0.5;
    double zipf_exponent = 1.1;
    std::uint64_t table_seed = 1234;

    void validate() const {
        if (vocab_text < 8) throw std::invalid_argument("text spec: vocab_text must be >= 8");
        if (min_len < 1 || min_len > max_len) throw std::invalid_argument("text spec: need 1 <= min_len <= max_len");
        if (order1_candidates < 1 || order2_candidates < 1)
            throw std::invalid_argument("text spec: candidate counts must be >= 1");
        if (p_order1 < 0 || p_order2 < 0 || p_order1 + p_order2 > 1)
            throw std::invalid_argument("text spec: mixture weights must be non-negative and sum to <= 1");
    }
    std::size_t content_vocab() const { return vocab_text - 2; }
};

// Transition structure derived deterministically from a SyntheticTextSpec.
class TextSource {
  public:
    explicit TextSource(const SyntheticTextSpec& spec) : spec_(spec) {
        spec_.validate();
        const std::size_t v = spec_.content_vocab();
        std::mt19937_64 rng(spec_.table_seed);
        std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(v) - 1);
        order1_.resize(v * spec_.order1_candidates);
        for (auto& c : order1_) c = tok(rng);
        rank_weights(spec_.order1_candidates, order1_w_);
        rank_weights(spec_.order2_candidates, order2_w_);

        std::vector<std::int32_t> perm(v);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<double> zipf(v);
        for (std::size_t r = 0; r < v; ++r) zipf[perm[r]] = 1.0 / std::pow(static_cast<double>(r + 1), spec_.zipf_exponent);
        unigram_ = std::discrete_distribution<std::int32_t>(zipf.begin(), zipf.end());
        order2_salt_ = rng();
    }

    const SyntheticTextSpec& spec() const { return spec_; }

    std::int32_t next(std::int32_t prev2, std::int32_t prev1, std::mt19937_64& rng) const {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        const double r = u(rng);
        if (prev2 >= 0 && r < spec_.p_order2) {
            const std::size_t i = pick(order2_w_, rng);
            return order2_candidate(prev2, prev1, i);
        }
        if (prev1 >= 0 && r < spec_.p_order2 + spec_.p_order1) {
            const std::size_t i = pick(order1_w_, rng);
            return order1_[static_cast<std::size_t>(prev1) * spec_.order1_candidates + i];
        }
        return unigram_(rng);
    }

    Sequence sample(std::size_t len, std::mt19937_64& rng) const {
        Sequence s;
        s.reserve(len);
        for (std::size_t i = 0; i < len; ++i)
            s.push_back(next(i >= 2 ? s[i - 2] : -1, i >= 1 ? s[i - 1] : -1, rng));
        return s;
    }

  private:
    static void rank_weights(std::size_t n, std::vector<double>& w) {
        w.resize(n);
        double z = 0;
        for (std::size_t i = 0; i < n; ++i) z += w[i] = 1.0 / static_cast<double>(i + 1);
        for (auto& x : w) x /= z;
    }

    static std::size_t pick(const std::vector<double>& w, std::mt19937_64& rng) {
        double r = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        for (std::size_t i = 0; i + 1 < w.size(); ++i) {
            if (r < w[i]) return i;
            r -= w[i];
        }
        return w.size() - 1;
    }

    // Order-2 table is implicit: a splitmix64 hash of (a, b, i) avoids storing V^2 rows.
    std::int32_t order2_candidate(std::int32_t a, std::int32_t b, std::size_t i) const {
        std::uint64_t z = order2_salt_ ^ (static_cast<std::uint64_t>(a) << 40) ^ (static_cast<std::uint64_t>(b) << 20) ^ i;
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        z ^= z >> 31;
        return static_cast<std::int32_t>(z % spec_.content_vocab());
    }

    SyntheticTextSpec spec_;
    std::vector<std::int32_t> order1_;
    std::vector<double> order1_w_, order2_w_;
    mutable std::discrete_distribution<std::int32_t> unigram_;
    std::uint64_t order2_salt_ = 0;
};

inline std::vector<Sequence> gen_text_corpus(const SyntheticTextSpec& spec, std::size_t count, std::uint64_t seed) {
    if (count == 0) throw std::invalid_argument("gen_text_corpus: count must be >= 1");
    TextSource src(spec);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> len(spec.min_len, spec.max_len);
    std::vector<Sequence> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(src.sample(len(rng), rng));
    return out;
}

// ---------------------------------------------------------------------------
// Speech codebook

struct SpeechCodebookSpec {
    std::size_t vocab_text = 256;
    std::size_t vocab_speech = 512;
    std::size_t k = 3;
    double noise = 0.05;
    std::uint64_t seed = 99;

    void validate() const {
        if (k < 1) throw std::invalid_argument("codebook: k must be >= 1");
        if (vocab_speech < 2) throw std::invalid_argument("codebook: vocab_speech must be >= 2");
        if (noise < 0 || noise > 1) throw std::invalid_argument("codebook: noise must be in [0, 1]");
        if (std::pow(static_cast<double>(vocab_speech), static_cast<double>(k)) < static_cast<double>(vocab_text))
            throw std::invalid_argument("codebook: vocab_speech^k cannot give every text token a distinct code");
    }
};

class SpeechCodebook {
  public:
    explicit SpeechCodebook(const SpeechCodebookSpec& spec) : spec_(spec) {
        spec_.validate();
        std::mt19937_64 rng(spec_.seed);
        std::uniform_int_distribution<std::int32_t> code(static_cast<std::int32_t>(spec_.vocab_text),
                                                         static_cast<std::int32_t>(spec_.vocab_text + spec_.vocab_speech) - 1);
        std::set<std::vector<std::int32_t>> used;
        table_.reserve(spec_.vocab_text);
        while (table_.size() < spec_.vocab_text) {
            std::vector<std::int32_t> c(spec_.k);
            for (auto& x : c) x = code(rng);
            if (used.insert(c).second) table_.push_back(std::move(c));
        }
    }

    const SpeechCodebookSpec& spec() const { return spec_; }
    const std::vector<std::int32_t>& codes(std::int32_t text_id) const {
        if (text_id < 0 || static_cast<std::size_t>(text_id) >= table_.size())
            throw std::out_of_range("codebook: text id " + std::to_string(text_id) + " outside the table");
        return table_[static_cast<std::size_t>(text_id)];
    }

  private:
    SpeechCodebookSpec spec_;
    std::vector<std::vector<std::int32_t>> table_;
};

struct AsrPair {
    Sequence speech;
    Sequence text;
    bool operator==(const AsrPair&) const = default;
};

// Noise replaces a code with a uniformly drawn different speech id.
inline std::vector<AsrPair> gen_asr_pairs(const std::vector<Sequence>& texts, const SpeechCodebook& book, std::uint64_t seed) {
    const auto& s = book.spec();
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution flip(s.noise);
    std::uniform_int_distribution<std::int32_t> other(1, static_cast<std::int32_t>(s.vocab_speech) - 1);
    const auto lo = static_cast<std::int32_t>(s.vocab_text);
    const auto vs = static_cast<std::int32_t>(s.vocab_speech);
    std::vector<AsrPair> out;
    out.reserve(texts.size());
    for (const auto& t : texts) {
        AsrPair p{{}, t};
        p.speech.reserve(t.size() * s.k);
        for (auto id : t) {
            for (auto c : book.codes(id)) {
                if (flip(rng)) c = lo + (c - lo + other(rng)) % vs;
                p.speech.push_back(c);
            }
        }
        out.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batches. Rows are stored flat and padded to the longest row.

struct Batch {
    std::size_t rows = 0;
    std::size_t width = 0;
    std::int32_t pad_id = -1;
    std::vector<std::int32_t> ids;
    std::vector<TokenType> types;
    // 1 where the token at this position is a prediction target (scored from
    // the previous position). Position 0 is never a target.
    std::vector<std::uint8_t> loss_mask;
    std::vector<std::int32_t> positions;
    std::vector<std::uint8_t> valid;
    std::vector<std::size_t> lengths;
    std::size_t dropped = 0;

    std::span<const std::int32_t> row_ids(std::size_t r) const { return {ids.data() + r * width, lengths[r]}; }
    std::span<const std::uint8_t> row_loss_mask(std::size_t r) const { return {loss_mask.data() + r * width, lengths[r]}; }
    TokenTypeMask row_types(std::size_t r) const {
        return {types.begin() + static_cast<std::ptrdiff_t>(r * width),
                types.begin() + static_cast<std::ptrdiff_t>(r * width + lengths[r])};
    }
    std::size_t target_count() const {
        std::size_t n = 0;
        for (auto m : loss_mask) n += m;
        return n;
    }
};

enum class LossMask { transcript, all_positions };

namespace detail {

inline void check_pad(std::int32_t pad_id, std::size_t vocab_total) {
    if (pad_id >= 0 && static_cast<std::size_t>(pad_id) < vocab_total)
        throw std::invalid_argument("make_batch: pad id " + std::to_string(pad_id) + " collides with a real token id");
}

inline Batch assemble(const std::vector<Sequence>& rows, const std::vector<TokenTypeMask>& types,
                      const std::vector<std::vector<std::uint8_t>>& masks, std::int32_t pad_id, std::size_t dropped) {
    Batch b;
    b.rows = rows.size();
    b.pad_id = pad_id;
    b.dropped = dropped;
    for (const auto& r : rows) b.width = std::max(b.width, r.size());
    const std::size_t n = b.rows * b.width;
    b.ids.assign(n, pad_id);
    b.types.assign(n, TokenType::text);
    b.loss_mask.assign(n, 0);
    b.positions.assign(n, 0);
    b.valid.assign(n, 0);
    for (std::size_t r = 0; r < b.rows; ++r) {
        b.lengths.push_back(rows[r].size());
        for (std::size_t t = 0; t < rows[r].size(); ++t) {
            const std::size_t i = r * b.width + t;
            b.ids[i] = rows[r][t];
            b.types[i] = types[r][t];
            b.loss_mask[i] = masks[r][t];
            b.positions[i] = static_cast<std::int32_t>(t);
            b.valid[i] = 1;
        }
    }
    return b;
}

}  // namespace detail

// Layout per row: [speech..., SEP, text..., EOS, pad...].
inline Batch make_batch(const std::vector<AsrPair>& pairs, std::size_t vocab_text, std::size_t vocab_speech,
                        std::size_t max_context, std::int32_t pad_id = -1, LossMask policy = LossMask::transcript) {
    detail::check_pad(pad_id, vocab_text + vocab_speech);
    std::vector<Sequence> rows;
    std::vector<TokenTypeMask> types;
    std::vector<std::vector<std::uint8_t>> masks;
    std::size_t dropped = 0;
    for (const auto& p : pairs) {
        const std::size_t len = p.speech.size() + p.text.size() + 2;
        if (len > max_context) {
            ++dropped;
            continue;
        }
        Sequence row(p.speech);
        row.push_back(sep_id(vocab_text));
        row.insert(row.end(), p.text.begin(), p.text.end());
        row.push_back(eos_id(vocab_text));
        TokenTypeMask ty(len, TokenType::text);
        std::fill(ty.begin(), ty.begin() + static_cast<std::ptrdiff_t>(p.speech.size()), TokenType::speech);
        std::vector<std::uint8_t> m(len, 0);
        const std::size_t first = policy == LossMask::transcript ? p.speech.size() + 1 : 1;
        std::fill(m.begin() + static_cast<std::ptrdiff_t>(first), m.end(), 1);
        rows.push_back(std::move(row));
        types.push_back(std::move(ty));
        masks.push_back(std::move(m));
    }
    return detail::assemble(rows, types, masks, pad_id, dropped);
}

// Plain language-model rows: every token after the first is a target.
inline Batch make_text_batch(const std::vector<Sequence>& seqs, std::size_t vocab_text, std::size_t max_context,
                             std::int32_t pad_id = -1) {
    detail::check_pad(pad_id, vocab_text);
    std::vector<Sequence> rows;
    std::vector<TokenTypeMask> types;
    std::vector<std::vector<std::uint8_t>> masks;
    std::size_t dropped = 0;
    for (const auto& s : seqs) {
        if (s.size() > max_context || s.empty()) {
            ++dropped;
            continue;
        }
        rows.push_back(s);
        types.emplace_back(s.size(), TokenType::text);
        std::vector<std::uint8_t> m(s.size(), 1);
        m[0] = 0;
        masks.push_back(std::move(m));
    }
    return detail::assemble(rows, types, masks, pad_id, dropped);
}

// ---------------------------------------------------------------------------
// Binary corpus format
//
//   line 1   : JSON header {"format":"mdup-corpus","version":1,"kind":"text"|"asr",
//              "vocab_text":..,"vocab_speech":..,"seed":..,"count":N} + '\n'
//   records  : text -> u32 len, len x i32
//              asr  -> u32 len, len x i32 (speech), u32 len, len x i32 (text)
//   All integers little-endian.

struct CorpusHeader {
    std::string kind;
    std::size_t vocab_text = 0;
    std::size_t vocab_speech = 0;
    std::uint64_t seed = 0;
    std::size_t count = 0;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("corpus: truncated file");
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

inline void put_seq(std::ostream& os, const Sequence& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    for (auto v : s) put_u32(os, static_cast<std::uint32_t>(v));
}

inline Sequence get_seq(std::istream& is) {
    Sequence s(get_u32(is));
    for (auto& v : s) v = static_cast<std::int32_t>(get_u32(is));
    return s;
}

inline void write_header(std::ostream& os, const CorpusHeader& h) {
    nlohmann::ordered_json j{{"format", "mdup-corpus"}, {"version", 1},          {"kind", h.kind},
                             {"vocab_text", h.vocab_text}, {"vocab_speech", h.vocab_speech}, {"seed", h.seed},
                             {"count", h.count}};
    os << j.dump() << '\n';
}

inline CorpusHeader read_header(std::istream& is, const std::string& want_kind) {
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("corpus: missing header");
    auto j = nlohmann::json::parse(line);
    if (j.value("format", "") != "mdup-corpus" || j.value("version", 0) != 1)
        throw std::runtime_error("corpus: unsupported format or version");
    CorpusHeader h{j.at("kind"), j.at("vocab_text"), j.at("vocab_speech"), j.at("seed"), j.at("count")};
    if (h.kind != want_kind) throw std::runtime_error("corpus: expected kind '" + want_kind + "', found '" + h.kind + "'");
    return h;
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("corpus: cannot write " + path);
    return os;
}

inline std::ifstream open_in(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("corpus: cannot read " + path);
    return is;
}

}  // namespace detail

inline void write_text_corpus(const std::string& path, CorpusHeader h, const std::vector<Sequence>& seqs) {
    auto os = detail::open_out(path);
    h.kind = "text";
    h.count = seqs.size();
    detail::write_header(os, h);
    for (const auto& s : seqs) detail::put_seq(os, s);
}

inline std::vector<Sequence> read_text_corpus(const std::string& path, CorpusHeader* header = nullptr) {
    auto is = detail::open_in(path);
    auto h = detail::read_header(is, "text");
    std::vector<Sequence> out;
    for (std::size_t i = 0; i < h.count; ++i) out.push_back(detail::get_seq(is));
    if (header) *header = h;
    return out;
}

inline void write_asr_corpus(const std::string& path, CorpusHeader h, const std::vector<AsrPair>& pairs) {
    auto os = detail::open_out(path);
    h.kind = "asr";
    h.count = pairs.size();
    detail::write_header(os, h);
    for (const auto& p : pairs) {
        detail::put_seq(os, p.speech);
        detail::put_seq(os, p.text);
    }
}

inline std::vector<AsrPair> read_asr_corpus(const std::string& path, CorpusHeader* header = nullptr) {
    auto is = detail::open_in(path);
    auto h = detail::read_header(is, "asr");
    std::vector<AsrPair> out;
    for (std::size_t i = 0; i < h.count; ++i) {
        AsrPair p;
        p.speech = detail::get_seq(is);
        p.text = detail::get_seq(is);
        out.push_back(std::move(p));
    }
    if (header) *header = h;
    return out;
}

}  // namespace mdup::data
