#pragma once

#include <string>
#include <vector>

#include "moadepth/tensor.hpp"

namespace moadepth {

struct PromptSet {
    std::vector<std::string> prompts;
    std::int64_t dim = 64;  // d_ctx

    void validate() const;  // non-empty, unique prompts, dim >= 1
    // "a photo of a {kitchen, classroom, ...}": ten indoor scene categories.
    static PromptSet default_set(std::int64_t dim);
};

// Fixed global scene context; never trainable, never updated.
struct ContextVector {
    TensorPtr c;  // [d_ctx], requires_grad = false
};

// Deterministic stand-in for a frozen text encoder: hashes the prompt with the
// global seed, draws a normal vector, l2-normalizes. Same prompt, same vector.
TensorPtr pseudo_text_encode(const std::string& prompt, std::int64_t dim,
                             std::uint64_t global_seed);

// c = (1/M) sum of unit embeddings. No re-normalization unless asked for.
ContextVector build_context(const PromptSet& prompts, std::uint64_t global_seed,
                            bool renormalize = false);
// Averaging seam shared with build_context; lets tests feed synthetic embeddings.
ContextVector build_context_from_embeddings(const std::vector<TensorPtr>& embeddings,
                                            bool renormalize = false);

// [d, h, w] features + [d_ctx] context -> [d + d_ctx, h, w]; every spatial
// location gets c appended to its channel vector.
TensorPtr fuse(const TensorPtr& features, const ContextVector& context);

}  // namespace moadepth
