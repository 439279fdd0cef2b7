#include "lightnas/searchspace.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <stdexcept>

namespace lightnas {

using json = nlohmann::json;

const std::vector<OpCode>& op_vocabulary() {
    static const std::vector<OpCode> vocab = [] {
        std::vector<OpCode> v;
        for (int h : kMhsaHeads) v.push_back({OpKind::MHSA, h});
        for (int k : kSepconvKernels) v.push_back({OpKind::SEPCONV, k});
        v.push_back({OpKind::FFN, 0});
        return v;
    }();
    return vocab;
}

std::string op_token(const OpCode& op) {
    switch (op.kind) {
        case OpKind::MHSA: return "mhsa" + std::to_string(op.param);
        case OpKind::SEPCONV: return "sep" + std::to_string(op.param);
        case OpKind::FFN: return "ffn";
    }
    return "?";
}

std::optional<OpCode> op_from_token(const std::string& token) {
    for (const OpCode& op : op_vocabulary()) {
        if (op_token(op) == token) return op;
    }
    return std::nullopt;
}

int SpaceDef::vocab_index(const OpCode& op) const {
    for (std::size_t i = 0; i < vocabulary.size(); ++i) {
        if (vocabulary[i] == op) return static_cast<int>(i);
    }
    return -1;
}

std::string SpaceDef::to_json() const {
    json j;
    j["encoder_slots"] = encoder_slots;
    j["decoder_slots"] = decoder_slots;
    json vocab = json::array();
    for (const OpCode& op : vocabulary) vocab.push_back(op_token(op));
    j["vocabulary"] = vocab;
    return j.dump();
}

SpaceDef SpaceDef::from_json(const std::string& text) {
    json j = json::parse(text);
    SpaceDef space;
    space.encoder_slots = j.at("encoder_slots").get<std::size_t>();
    space.decoder_slots = j.at("decoder_slots").get<std::size_t>();
    space.vocabulary.clear();
    for (const auto& tok : j.at("vocabulary")) {
        auto op = op_from_token(tok.get<std::string>());
        if (!op) {
            throw std::invalid_argument("space: unknown op token '" + tok.get<std::string>() + "'");
        }
        space.vocabulary.push_back(*op);
    }
    if (space.vocabulary.empty()) throw std::invalid_argument("space: empty vocabulary");
    return space;
}

void validate_arch(const Architecture& arch, const SpaceDef& space) {
    if (arch.encoder_ops.size() != space.encoder_slots ||
        arch.decoder_ops.size() != space.decoder_slots) {
        throw std::invalid_argument("architecture: slot counts " +
                                    std::to_string(arch.encoder_ops.size()) + "+" +
                                    std::to_string(arch.decoder_ops.size()) +
                                    " do not match space " + std::to_string(space.encoder_slots) +
                                    "+" + std::to_string(space.decoder_slots));
    }
    for (std::size_t i = 0; i < arch.total_slots(); ++i) {
        if (space.vocab_index(arch.slot(i)) < 0) {
            throw std::invalid_argument("architecture: op '" + op_token(arch.slot(i)) +
                                        "' at slot " + std::to_string(i) + " not in vocabulary");
        }
    }
}

std::uint64_t space_size(const SpaceDef& space) {
    if (space.vocabulary.empty()) throw std::invalid_argument("space_size: empty vocabulary");
    const std::uint64_t base = space.vocabulary.size();
    std::uint64_t result = 1;
    for (std::size_t i = 0; i < space.total_slots(); ++i) {
        if (__builtin_mul_overflow(result, base, &result)) {
            throw std::overflow_error("space_size: cardinality exceeds 64-bit range");
        }
    }
    return result;
}

static Architecture arch_from_indices(const SpaceDef& space, const std::vector<std::size_t>& idx) {
    Architecture a;
    a.encoder_ops.reserve(space.encoder_slots);
    a.decoder_ops.reserve(space.decoder_slots);
    for (std::size_t s = 0; s < space.total_slots(); ++s) {
        const OpCode& op = space.vocabulary[idx[s]];
        if (s < space.encoder_slots) {
            a.encoder_ops.push_back(op);
        } else {
            a.decoder_ops.push_back(op);
        }
    }
    return a;
}

std::vector<Architecture> sample_uniform(const SpaceDef& space, std::uint64_t seed, std::size_t n) {
    if (space.vocabulary.empty()) throw std::invalid_argument("sample_uniform: empty vocabulary");
    Rng rng(seed);
    std::vector<Architecture> out;
    out.reserve(n);
    std::vector<std::size_t> idx(space.total_slots());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t s = 0; s < idx.size(); ++s) {
            idx[s] = rng.below(space.vocabulary.size());
        }
        out.push_back(arch_from_indices(space, idx));
    }
    return out;
}

std::vector<double> encode_onehot(const Architecture& arch, const SpaceDef& space) {
    validate_arch(arch, space);
    const std::size_t v = space.vocabulary.size();
    std::vector<double> features(space.total_slots() * v, 0.0);
    for (std::size_t s = 0; s < arch.total_slots(); ++s) {
        features[s * v + static_cast<std::size_t>(space.vocab_index(arch.slot(s)))] = 1.0;
    }
    return features;
}

std::vector<double> encode_ordinal(const Architecture& arch, const SpaceDef& space) {
    validate_arch(arch, space);
    std::vector<double> features;
    features.reserve(arch.total_slots() * 2);
    for (std::size_t s = 0; s < arch.total_slots(); ++s) {
        const OpCode& op = arch.slot(s);
        features.push_back(static_cast<double>(static_cast<int>(op.kind)));
        features.push_back(static_cast<double>(op.param));
    }
    return features;
}

std::vector<double> encode_features(const Architecture& arch, const SpaceDef& space,
                                    FeatureEncoding enc) {
    return enc == FeatureEncoding::OneHot ? encode_onehot(arch, space)
                                          : encode_ordinal(arch, space);
}

std::size_t feature_count(const SpaceDef& space, FeatureEncoding enc) {
    return enc == FeatureEncoding::OneHot ? space.total_slots() * space.vocabulary.size()
                                          : space.total_slots() * 2;
}

namespace {

std::vector<OpCode> parse_op_list(const std::string& text, const std::string& side,
                                  std::size_t base_pos) {
    std::vector<OpCode> ops;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t comma = text.find(',', start);
        std::string token = text.substr(start, comma == std::string::npos ? comma : comma - start);
        auto op = op_from_token(token);
        if (!op) {
            throw std::invalid_argument("parse_arch: unknown op token '" + token + "' in " + side +
                                        " list at position " + std::to_string(base_pos + start));
        }
        ops.push_back(*op);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return ops;
}

}  // namespace

Architecture parse_arch(const std::string& text) {
    const std::string enc_prefix = "enc:[";
    const std::string mid = "];dec:[";
    if (text.rfind(enc_prefix, 0) != 0) {
        throw std::invalid_argument("parse_arch: expected 'enc:[' at position 0");
    }
    std::size_t mid_pos = text.find(mid);
    if (mid_pos == std::string::npos) {
        throw std::invalid_argument("parse_arch: expected '];dec:[' separator");
    }
    if (text.empty() || text.back() != ']') {
        throw std::invalid_argument("parse_arch: expected ']' at end of input");
    }
    std::string enc_part = text.substr(enc_prefix.size(), mid_pos - enc_prefix.size());
    std::size_t dec_start = mid_pos + mid.size();
    std::string dec_part = text.substr(dec_start, text.size() - 1 - dec_start);

    Architecture arch;
    arch.encoder_ops = parse_op_list(enc_part, "encoder", enc_prefix.size());
    arch.decoder_ops = parse_op_list(dec_part, "decoder", dec_start);
    return arch;
}

std::string format_arch(const Architecture& arch) {
    std::string out = "enc:[";
    for (std::size_t i = 0; i < arch.encoder_ops.size(); ++i) {
        if (i) out += ",";
        out += op_token(arch.encoder_ops[i]);
    }
    out += "];dec:[";
    for (std::size_t i = 0; i < arch.decoder_ops.size(); ++i) {
        if (i) out += ",";
        out += op_token(arch.decoder_ops[i]);
    }
    return out + "]";
}

Architecture arch_at(const SpaceDef& space, std::uint64_t rank) {
    const std::uint64_t base = space.vocabulary.size();
    std::vector<std::size_t> idx(space.total_slots(), 0);
    // Slot 0 is the most significant digit.
    for (std::size_t s = space.total_slots(); s-- > 0;) {
        idx[s] = static_cast<std::size_t>(rank % base);
        rank /= base;
    }
    return arch_from_indices(space, idx);
}

std::vector<Architecture> enumerate_space(const SpaceDef& space, std::uint64_t offset,
                                          std::uint64_t limit) {
    const std::uint64_t total = space_size(space);
    if (offset > total || limit > total - offset) {
        throw std::out_of_range("enumerate: range [" + std::to_string(offset) + ", " +
                                std::to_string(offset + limit) + ") exceeds space size " +
                                std::to_string(total));
    }
    std::vector<Architecture> out;
    out.reserve(static_cast<std::size_t>(limit));
    for (std::uint64_t r = offset; r < offset + limit; ++r) {
        out.push_back(arch_at(space, r));
    }
    return out;
}

std::string arch_key(const Architecture& arch) { return format_arch(arch); }

}  // namespace lightnas
