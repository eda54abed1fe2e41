#pragma once

// SGD with momentum for network weights, Adam for architecture logits.
// Both follow the common deep-learning library update rules.

#include <cmath>
#include <map>
#include <string>

#include <json.hpp>

#include "dints/error.hpp"
#include "dints/tensor.hpp"

namespace dints {

/// v <- mu v + (g + wd w);  w <- w - lr v
class SgdMomentum {
public:
    double momentum = 0.9;
    double weight_decay = 4e-5;

    void step(const std::string& name, Tensor& w, const Tensor& g, double lr)
    {
        require_same_shape(w, g, "sgd step");
        auto [it, fresh] = velocity_.try_emplace(name, w.shape, 0.0);
        Tensor& v = it->second;
        if (!fresh) require_same_shape(w, v, "sgd state");
        for (std::size_t k = 0; k < w.size(); ++k) {
            v.data[k] = momentum * v.data[k] + (g.data[k] + weight_decay * w.data[k]);
            w.data[k] -= lr * v.data[k];
        }
    }

    nlohmann::json state() const
    {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [name, v] : velocity_) j[name] = v.data;
        return j;
    }

    void load_state(const nlohmann::json& j, const std::map<std::string, Tensor>& shapes)
    {
        velocity_.clear();
        for (auto it = j.begin(); it != j.end(); ++it) {
            auto s = shapes.find(it.key());
            if (s == shapes.end()) throw ValidationError("optimizer state for unknown weight '" + it.key() + "'");
            velocity_[it.key()] = Tensor(s->second.shape, it.value().get<std::vector<double>>());
        }
    }

private:
    std::map<std::string, Tensor> velocity_;
};

/// Adam with bias correction; weight decay added to the gradient.
class Adam {
public:
    double lr = 0.008;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    /// Call once per optimization step, before the per-tensor updates.
    void begin_step() { ++t_; }
    long long steps() const { return t_; }

    void step(const std::string& name, Tensor& w, const Tensor& g)
    {
        if (t_ == 0) throw ValidationError("Adam::step before begin_step");
        require_same_shape(w, g, "adam step");
        auto [it, fresh] = moments_.try_emplace(name, Moments{Tensor(w.shape, 0.0), Tensor(w.shape, 0.0)});
        Moments& m = it->second;
        if (!fresh) require_same_shape(w, m.m, "adam state");
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double gk = g.data[k] + weight_decay * w.data[k];
            m.m.data[k] = beta1 * m.m.data[k] + (1.0 - beta1) * gk;
            m.v.data[k] = beta2 * m.v.data[k] + (1.0 - beta2) * gk * gk;
            w.data[k] -= lr * (m.m.data[k] / c1) / (std::sqrt(m.v.data[k] / c2) + eps);
        }
    }

    nlohmann::json state() const
    {
        nlohmann::json mom = nlohmann::json::object();
        for (const auto& [name, m] : moments_) mom[name] = {{"shape", m.m.shape}, {"m", m.m.data}, {"v", m.v.data}};
        return {{"t", t_}, {"moments", mom}};
    }

    void load_state(const nlohmann::json& j)
    {
        t_ = j.at("t").get<long long>();
        moments_.clear();
        const auto& mom = j.at("moments");
        for (auto it = mom.begin(); it != mom.end(); ++it) {
            const Shape s = it.value().at("shape").get<Shape>();
            moments_[it.key()] = Moments{Tensor(s, it.value().at("m").get<std::vector<double>>()),
                                         Tensor(s, it.value().at("v").get<std::vector<double>>())};
        }
    }

private:
    struct Moments {
        Tensor m, v;
    };
    long long t_ = 0;
    std::map<std::string, Moments> moments_;
};

} // namespace dints
