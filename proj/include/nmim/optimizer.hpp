#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "nmim/common.hpp"
#include "nmim/config.hpp"
#include "nmim/encoder.hpp"
#include "nmim/tensor.hpp"

namespace nmim {

template <typename S>
struct ParamRef {
    std::string name;
    Tensor<S> tensor; // shares the underlying node with the owner
};

template <typename S>
std::vector<ParamRef<S>> collect_params(EncoderParams<S>& params) {
    std::vector<ParamRef<S>> out;
    params.for_each_param([&](const std::string& name, Tensor<S>& t) {
        out.push_back(ParamRef<S>{name, t});
    });
    return out;
}

// Adam with decoupled weight decay and optional linear warmup. Weight decay
// touches only matrices and convolution kernels; biases, norm parameters, and
// single-row embeddings are exempt.
template <typename S>
class AdamW {
public:
    struct Slot {
        std::vector<S> m, v;
    };

    AdamW() = default;
    explicit AdamW(OptimizerConfig cfg) : cfg_(cfg) {}

    const OptimizerConfig& config() const { return cfg_; }
    int64_t steps() const { return steps_; }
    void set_steps(int64_t s) { steps_ = s; }

    static bool decays(const Tensor<S>& t) {
        if (t.ndim() == 2) return t.dim(0) > 1;
        return t.ndim() > 2;
    }

    void step(std::vector<ParamRef<S>>& params) {
        ++steps_;
        const double warm = cfg_.warmup_steps > 0
                                ? std::min(1.0, static_cast<double>(steps_) / cfg_.warmup_steps)
                                : 1.0;
        const S lr = static_cast<S>(cfg_.lr * warm);
        const S b1 = static_cast<S>(cfg_.beta1);
        const S b2 = static_cast<S>(cfg_.beta2);
        const S eps = static_cast<S>(cfg_.eps);
        const S bc1 = S(1) - static_cast<S>(std::pow(cfg_.beta1, static_cast<double>(steps_)));
        const S bc2 = S(1) - static_cast<S>(std::pow(cfg_.beta2, static_cast<double>(steps_)));

        for (auto& p : params) {
            auto& slot = state_[p.name];
            auto& vals = p.tensor.values();
            const size_t n = vals.size();
            if (slot.m.empty()) {
                slot.m.assign(n, S(0));
                slot.v.assign(n, S(0));
            }
            require(slot.m.size() == n, "AdamW: state size mismatch for '", p.name, "'");
            const auto& g = p.tensor.grad();
            const S wd = decays(p.tensor) ? static_cast<S>(cfg_.weight_decay) : S(0);
            for (size_t i = 0; i < n; ++i) {
                const S gi = g.empty() ? S(0) : g[i];
                slot.m[i] = b1 * slot.m[i] + (S(1) - b1) * gi;
                slot.v[i] = b2 * slot.v[i] + (S(1) - b2) * gi * gi;
                const S mhat = slot.m[i] / bc1;
                const S vhat = slot.v[i] / bc2;
                vals[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * vals[i]);
            }
        }
    }

    static void zero_grads(std::vector<ParamRef<S>>& params) {
        for (auto& p : params) p.tensor.zero_grad();
    }

    // Deterministic traversal of the moment buffers, for persistence.
    template <typename F>
    void for_each_state(F&& fn) {
        for (auto& [name, slot] : state_) {
            fn(name, slot);
        }
    }

    Slot& slot(const std::string& name) { return state_[name]; }
    size_t state_size() const { return state_.size(); }

private:
    OptimizerConfig cfg_;
    int64_t steps_ = 0;
    std::map<std::string, Slot> state_;
};

} // namespace nmim
