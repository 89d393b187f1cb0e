#include "moadepth/context.hpp"

#include <cmath>
#include <set>

#include "moadepth/error.hpp"
#include "moadepth/rng.hpp"

namespace moadepth {

void PromptSet::validate() const {
    if (prompts.empty()) throw ParameterError("prompts: set must be non-empty");
    if (dim < 1) throw ParameterError("prompts: context dimension must be >= 1");
    std::set<std::string> seen(prompts.begin(), prompts.end());
    if (seen.size() != prompts.size()) {
        throw ParameterError("prompts: entries must be unique");
    }
}

PromptSet PromptSet::default_set(std::int64_t dim) {
    PromptSet s;
    s.dim = dim;
    for (const char* category :
         {"kitchen", "classroom", "bedroom", "bathroom", "office", "living room",
          "hallway", "bookstore", "dining room", "study"}) {
        s.prompts.push_back(std::string("a photo of a ") + category);
    }
    return s;
}

TensorPtr pseudo_text_encode(const std::string& prompt, std::int64_t dim,
                             std::uint64_t global_seed) {
    if (prompt.empty()) throw ParameterError("pseudo_text_encode: empty prompt");
    if (dim < 1) throw ParameterError("pseudo_text_encode: dim must be >= 1");
    Rng rng(mix64(fnv1a64(prompt) ^ mix64(global_seed)));
    auto v = Tensor::zeros({dim});
    double norm_sq = 0.0;
    for (auto& x : v->data) {
        x = rng.normal(0.0, 1.0);
        norm_sq += x * x;
    }
    const double inv = 1.0 / std::sqrt(norm_sq);
    for (auto& x : v->data) x *= inv;
    return v;
}

ContextVector build_context_from_embeddings(const std::vector<TensorPtr>& embeddings,
                                            bool renormalize) {
    if (embeddings.empty()) {
        throw ParameterError("build_context: needs at least one embedding");
    }
    const std::int64_t dim = embeddings.front()->numel();
    auto c = Tensor::zeros({dim});
    for (const auto& e : embeddings) {
        if (e->numel() != dim) {
            throw DimensionError("build_context: embedding size mismatch");
        }
        for (std::int64_t i = 0; i < dim; ++i) c->data[i] += e->data[i];
    }
    const double inv_m = 1.0 / static_cast<double>(embeddings.size());
    for (auto& x : c->data) x *= inv_m;
    if (renormalize) {
        double norm_sq = 0.0;
        for (double x : c->data) norm_sq += x * x;
        if (norm_sq > 0.0) {
            const double inv = 1.0 / std::sqrt(norm_sq);
            for (auto& x : c->data) x *= inv;
        }
    }
    c->requires_grad = false;
    return {c};
}

ContextVector build_context(const PromptSet& prompts, std::uint64_t global_seed,
                            bool renormalize) {
    prompts.validate();
    std::vector<TensorPtr> embeddings;
    embeddings.reserve(prompts.prompts.size());
    for (const auto& p : prompts.prompts) {
        embeddings.push_back(pseudo_text_encode(p, prompts.dim, global_seed));
    }
    return build_context_from_embeddings(embeddings, renormalize);
}

TensorPtr fuse(const TensorPtr& features, const ContextVector& context) {
    if (features->rank() != 3) {
        throw DimensionError("fuse: expected features [d,h,w], got " +
                             shape_str(features->shape));
    }
    const std::int64_t h = features->shape[1];
    const std::int64_t w = features->shape[2];
    const std::int64_t d_ctx = context.c->numel();
    TensorPtr plane = broadcast_to(reshape(context.c, {d_ctx, 1, 1}), {d_ctx, h, w});
    return concat({features, plane}, 0);
}

}  // namespace moadepth
