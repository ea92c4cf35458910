#include "ltp/optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "ltp/error.hpp"

namespace ltp {

namespace {

const std::vector<std::uint8_t>* gate_for(const SparsityMask* mask, const std::string& name) {
    if (mask == nullptr || is_prompt_param(name)) {
        return nullptr;
    }
    auto it = mask->entries.find(name);
    if (it == mask->entries.end()) {
        throw DomainError("masked_adamw_step: mask has no entry for " + name);
    }
    return &it->second.bits;
}

Tensor& zeros_like(std::map<std::string, Tensor>& moments, const std::string& name, const Tensor& param) {
    auto it = moments.find(name);
    if (it == moments.end()) {
        it = moments.emplace(name, Tensor(param.shape(), 0.0)).first;
    }
    return it->second;
}

}  // namespace

void masked_adamw_step(Checkpoint& checkpoint, SoftPrompt* prompt, const GradientMap& grads,
                       const SparsityMask* mask, OptimizerState& state) {
    if (mask != nullptr) {
        check_mask_matches(*mask, checkpoint);
    }
    // Validate everything before touching any parameter.
    std::vector<std::pair<Tensor*, const Tensor*>> work;
    std::vector<const std::string*> names;
    for (const auto& [name, g] : grads) {
        Tensor* param = nullptr;
        if (is_prompt_param(name)) {
            if (prompt != nullptr) {
                auto it = prompt->params.find(name);
                param = it == prompt->params.end() ? nullptr : &it->second;
            }
        } else if (checkpoint.contains(name)) {
            param = &checkpoint.at(name);
        }
        if (param == nullptr) {
            throw DomainError("masked_adamw_step: gradient for unknown parameter " + name);
        }
        if (param->shape() != g.shape()) {
            throw ShapeError("masked_adamw_step: gradient for " + name + " has shape " + shape_str(g.shape()) +
                             ", parameter has " + shape_str(param->shape()));
        }
        work.emplace_back(param, &g);
        names.push_back(&name);
    }

    const AdamWConfig& hp = state.hp;
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bias1 = 1.0 - std::pow(hp.beta1, t);
    const double bias2 = 1.0 - std::pow(hp.beta2, t);
    const double step_size = hp.learning_rate / bias1;
    const double bias2_sqrt = std::sqrt(bias2);
    const double decay = 1.0 - hp.learning_rate * hp.weight_decay;

    for (std::size_t w = 0; w < work.size(); ++w) {
        const std::string& name = *names[w];
        Tensor& param = *work[w].first;
        const Tensor& grad = *work[w].second;
        const std::vector<std::uint8_t>* gate = gate_for(mask, name);
        if (gate != nullptr && std::find(gate->begin(), gate->end(), 1) == gate->end()) {
            continue;
        }
        Tensor& m = zeros_like(state.first_moment, name, param);
        Tensor& v = zeros_like(state.second_moment, name, param);
        double* p = param.data();
        double* pm = m.data();
        double* pv = v.data();
        const double* g = grad.data();
        for (std::size_t i = 0; i < param.size(); ++i) {
            if (gate != nullptr && (*gate)[i] == 0) {
                continue;
            }
            p[i] *= decay;
            pm[i] = hp.beta1 * pm[i] + (1.0 - hp.beta1) * g[i];
            pv[i] = hp.beta2 * pv[i] + (1.0 - hp.beta2) * g[i] * g[i];
            const double denom = std::sqrt(pv[i]) / bias2_sqrt + hp.epsilon;
            p[i] -= step_size * pm[i] / denom;
        }
    }
}

double clip_grad_norm(GradientMap& grads, const SparsityMask* mask, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, g] : grads) {
        const std::vector<std::uint8_t>* gate = gate_for(mask, name);
        const double* pg = g.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (gate == nullptr || (*gate)[i] != 0) {
                sq += pg[i] * pg[i];
            }
        }
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double factor = max_norm / (norm + 1e-6);
        for (auto& [name, g] : grads) {
            for (double& x : g.values()) {
                x *= factor;
            }
        }
    }
    return norm;
}

}  // namespace ltp
