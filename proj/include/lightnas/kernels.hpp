#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lightnas/rng.hpp"
#include "lightnas/searchspace.hpp"
#include "lightnas/tensor.hpp"

namespace lightnas {

// Multiply-accumulate counter. Kernels add the exact number of multiply-adds
// their inner loops execute; softmax, normalization, activations and bias
// adds contribute nothing by convention.
struct MacCounter {
    std::uint64_t macs = 0;
};

enum class LayerKind {
    Linear,
    LayerNorm,
    Embedding,
    Conv1d,
    SepConv1d,
    Mhsa,
    Ffn,
    LengthReg,
};

std::string layer_kind_name(LayerKind kind);

struct LayerDims {
    std::size_t in = 0;      // input feature dim
    std::size_t out = 0;     // output feature dim
    std::size_t filter = 0;  // FFN inner width
    std::size_t kernel = 0;  // conv kernel size (odd)
    std::size_t heads = 0;   // MHSA head count
    std::size_t vocab = 0;   // embedding rows
    double epsilon = 1e-5;   // LayerNorm
    bool bias = true;
    std::vector<std::size_t> durations;  // LengthReg only
};

// One instantiated layer: kind, dims and an ordered list of named weight
// tensors. Weight order is part of the serialization format.
struct OpInstance {
    LayerKind kind = LayerKind::Linear;
    LayerDims dims;
    std::vector<std::pair<std::string, Tensor>> weights;

    Tensor& weight(std::string_view name);
    const Tensor& weight(std::string_view name) const;
    std::size_t param_count() const;
};

// Gradients w.r.t. an op's weights, aligned index-for-index with op.weights.
using OpGrads = std::vector<Tensor>;

OpGrads zero_grads(const OpInstance& op);

// ---- constructors (weights allocated, zero-filled) ----
OpInstance make_linear(std::size_t in, std::size_t out, bool bias = true);
OpInstance make_layernorm(std::size_t dim, double epsilon = 1e-5);
OpInstance make_embedding(std::size_t vocab, std::size_t dim);
OpInstance make_conv1d(std::size_t in, std::size_t out, std::size_t kernel, bool bias = true);
OpInstance make_sepconv1d(std::size_t in, std::size_t out, std::size_t kernel, bool bias = true);
OpInstance make_mhsa(std::size_t dim, std::size_t heads, bool bias = true);
OpInstance make_ffn(std::size_t dim, std::size_t filter, std::size_t kernel, bool bias = true);
OpInstance make_length_reg(std::vector<std::size_t> durations);

// Searched-op factory: OpCode -> kernel instance at hidden size d.
OpInstance make_searched_op(const OpCode& code, std::size_t d, std::size_t ffn_filter,
                            std::size_t ffn_kernel, bool bias = true);

// Uniform init in [-sqrt(1/fan_in), +sqrt(1/fan_in)] from a named stream of
// the given seed; LayerNorm gets gain 1 / bias 0.
void init_weights(OpInstance& op, const Rng& base, std::string_view name);

// ---- forward ----
// x is [L x in] except Embedding ([L] of integral token ids stored as
// doubles) and LengthReg ([L x d] expanded by op.dims.durations).
Tensor forward(const OpInstance& op, const Tensor& x, MacCounter* macs = nullptr);

// MHSA forward that also exposes the [heads x L x L] attention weights.
Tensor mhsa_forward_attn(const OpInstance& op, const Tensor& x, Tensor* attention,
                         MacCounter* macs = nullptr);

// ---- backward ----
// Recomputes intermediates, accumulates weight gradients into grads and
// returns the gradient w.r.t. x (zeros for Embedding token input).
Tensor backward(const OpInstance& op, const Tensor& x, const Tensor& grad_out, OpGrads& grads);

// Convenience wrappers used by the toy model.
Tensor embedding_forward(const OpInstance& op, const std::vector<int>& tokens,
                         MacCounter* macs = nullptr);
void embedding_backward(const OpInstance& op, const std::vector<int>& tokens,
                        const Tensor& grad_out, OpGrads& grads);
Tensor length_regulate(const Tensor& h, const std::vector<std::size_t>& durations);

// Pre-LN residual block around a searched op: y = x + op(norm(x)).
// When `norm` is absent the op consumes x directly.
struct SearchedBlock {
    std::optional<OpInstance> norm;
    OpInstance op;

    std::size_t param_count() const;
};

SearchedBlock make_searched_block(const OpCode& code, std::size_t d, std::size_t ffn_filter,
                                  std::size_t ffn_kernel, bool bias = true,
                                  bool layernorm = true);
void init_block(SearchedBlock& block, const Rng& base, std::string_view name);

Tensor block_forward(const SearchedBlock& block, const Tensor& x, MacCounter* macs = nullptr);

struct BlockGrads {
    OpGrads norm;
    OpGrads op;
};
BlockGrads zero_block_grads(const SearchedBlock& block);
Tensor block_backward(const SearchedBlock& block, const Tensor& x, const Tensor& grad_out,
                      BlockGrads& grads);

// ---- gradient checking ----
// Compares analytic gradients of loss = sum(c .* f(x)) against central
// finite differences over every weight element (and input, where the input
// is differentiable). Returns the max relative error. Throws
// std::runtime_error on non-finite gradients.
double grad_check(const OpInstance& op, const Tensor& x, double eps, std::uint64_t seed = 0);

// ---- binary weight container ----
// Little-endian layout: magic, version, kind, dims, then each named tensor
// as (name, rank, shape, row-major f64 payload).
void save_op(const OpInstance& op, std::ostream& out);
OpInstance load_op(std::istream& in);
void save_op_file(const OpInstance& op, const std::string& path);
OpInstance load_op_file(const std::string& path);

}  // namespace lightnas
