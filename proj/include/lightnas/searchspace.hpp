#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lightnas/rng.hpp"

namespace lightnas {

enum class OpKind { MHSA, SEPCONV, FFN };

// One candidate operation. `param` is the head count for MHSA, the kernel
// size for SEPCONV, and unused (0) for FFN.
struct OpCode {
    OpKind kind = OpKind::FFN;
    int param = 0;

    bool operator==(const OpCode&) const = default;
};

// The legal head counts and kernel sizes.
inline constexpr int kMhsaHeads[] = {2, 4, 8};
inline constexpr int kSepconvKernels[] = {1, 5, 9, 13, 17, 21, 25};

// Canonical 11-op vocabulary: MHSA heads ascending, SepConv kernels
// ascending, FFN last. Index order is load-bearing: one-hot features and
// enumeration both key off it.
const std::vector<OpCode>& op_vocabulary();

std::string op_token(const OpCode& op);                 // "mhsa4", "sep13", "ffn"
std::optional<OpCode> op_from_token(const std::string& token);

// Search space: a chain of slots per side, every slot drawing from one
// shared vocabulary.
struct SpaceDef {
    std::size_t encoder_slots = 4;
    std::size_t decoder_slots = 4;
    std::vector<OpCode> vocabulary = op_vocabulary();

    std::size_t total_slots() const { return encoder_slots + decoder_slots; }

    // Index of op in the vocabulary, or -1.
    int vocab_index(const OpCode& op) const;

    std::string to_json() const;
    static SpaceDef from_json(const std::string& text);
};

struct Architecture {
    std::vector<OpCode> encoder_ops;
    std::vector<OpCode> decoder_ops;

    bool operator==(const Architecture&) const = default;

    std::size_t total_slots() const { return encoder_ops.size() + decoder_ops.size(); }
    const OpCode& slot(std::size_t i) const {
        return i < encoder_ops.size() ? encoder_ops[i] : decoder_ops[i - encoder_ops.size()];
    }
};

// Throws std::invalid_argument when arch does not fit the space.
void validate_arch(const Architecture& arch, const SpaceDef& space);

// |vocab|^(enc+dec) in exact integer arithmetic; throws std::overflow_error
// when the count exceeds uint64.
std::uint64_t space_size(const SpaceDef& space);

// n i.i.d. uniform draws, deterministic per seed.
std::vector<Architecture> sample_uniform(const SpaceDef& space, std::uint64_t seed, std::size_t n);

// Binary one-hot feature vector of length slots*|vocab|; slot p holding
// vocab index i sets component p*|vocab|+i.
std::vector<double> encode_onehot(const Architecture& arch, const SpaceDef& space);

// Compact ordinal alternative: per slot [kind index, param]. Kept behind a
// config switch in the predictor; one-hot is the default.
std::vector<double> encode_ordinal(const Architecture& arch, const SpaceDef& space);

enum class FeatureEncoding { OneHot, Ordinal };

std::vector<double> encode_features(const Architecture& arch, const SpaceDef& space,
                                    FeatureEncoding enc);
std::size_t feature_count(const SpaceDef& space, FeatureEncoding enc);

// Text codec: "enc:[sep5,sep25,sep13,sep9];dec:[sep17,sep21,sep9,sep13]".
// parse_arch throws std::invalid_argument naming the offending token and
// its position.
Architecture parse_arch(const std::string& text);
std::string format_arch(const Architecture& arch);

// Page of the lexicographic enumeration (slot 0 most significant, ops by
// canonical index). Throws std::out_of_range when offset+limit exceeds the
// space size.
std::vector<Architecture> enumerate_space(const SpaceDef& space, std::uint64_t offset,
                                          std::uint64_t limit);

// Architecture at a given lexicographic rank.
Architecture arch_at(const SpaceDef& space, std::uint64_t rank);

// Stable key for dedup maps.
std::string arch_key(const Architecture& arch);

}  // namespace lightnas
