#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "phr/autodiff.hpp"
#include "phr/rng.hpp"
#include "phr/tensor.hpp"

namespace phr {

/// Named parameter registry. Values persist across steps; gradients are
/// accumulated here between optimizer updates (so micro-batches compose).
template <class T>
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor<T> value;
        Tensor<T> grad;
        bool trainable = true;
    };

    int add(const std::string& name, Tensor<T> value, bool trainable = true) {
        require(index_.find(name) == index_.end(), "duplicate parameter: " + name);
        Entry e;
        e.name = name;
        e.grad = Tensor<T>(value.shape);
        e.value = std::move(value);
        e.trainable = trainable;
        entries_.push_back(std::move(e));
        int id = static_cast<int>(entries_.size()) - 1;
        index_[name] = id;
        return id;
    }

    Entry& at(int id) { return entries_[static_cast<std::size_t>(id)]; }
    const Entry& at(int id) const { return entries_[static_cast<std::size_t>(id)]; }

    int find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? -1 : it->second;
    }

    i64 size() const { return static_cast<i64>(entries_.size()); }
    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    void zero_grads() {
        for (auto& e : entries_) e.grad.fill(T(0));
    }

    i64 count_params(const std::string& prefix = "") const {
        i64 n = 0;
        for (const auto& e : entries_)
            if (e.name.rfind(prefix, 0) == 0) n += e.value.numel();
        return n;
    }

    void set_trainable_by_prefix(const std::string& prefix, bool trainable) {
        for (auto& e : entries_)
            if (e.name.rfind(prefix, 0) == 0) e.trainable = trainable;
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, int> index_;
};

/// Ties a per-step Graph to the ParamStore: parameters enter the tape as
/// leaves once, and their gradients flow back into the store afterwards.
template <class T>
class Binding {
public:
    Binding(Graph<T>& graph, ParamStore<T>& store, bool training)
        : graph_(graph), store_(store), training_(training),
          node_of_(static_cast<std::size_t>(store.size()), -1) {}

    Graph<T>& graph() { return graph_; }
    bool training() const { return training_; }

    int node(int param_id) {
        int& n = node_of_[static_cast<std::size_t>(param_id)];
        if (n < 0) {
            const auto& e = store_.at(param_id);
            n = graph_.leaf(e.value, training_ && e.trainable);
        }
        return n;
    }

    /// Adds the tape's parameter gradients into the store (call after
    /// graph.backward).
    void accumulate_grads() {
        for (std::size_t p = 0; p < node_of_.size(); ++p) {
            int n = node_of_[p];
            if (n < 0) continue;
            auto& e = store_.at(static_cast<int>(p));
            if (!e.trainable) continue;
            const auto& gsrc = graph_.grad(n);
            if (gsrc.data.empty()) continue;
            for (std::size_t i = 0; i < e.grad.data.size(); ++i)
                e.grad.data[i] += gsrc.data[i];
        }
    }

private:
    Graph<T>& graph_;
    ParamStore<T>& store_;
    bool training_;
    std::vector<int> node_of_;
};

// ---------------------------------------------------------------------------
// layers

template <class T>
struct Conv2dLayer {
    int w = -1, b = -1;
    i64 stride = 1, pad = 1;

    static Conv2dLayer init(ParamStore<T>& s, const std::string& name, i64 cin, i64 cout, i64 k,
                            Rng& rng, i64 stride = 1, i64 pad = 1, bool zero_init = false) {
        Conv2dLayer l;
        l.stride = stride;
        l.pad = pad;
        double scale = zero_init ? 0.0 : std::sqrt(2.0 / static_cast<double>(cin * k * k));
        l.w = s.add(name + ".w", Tensor<T>::randn({cout, cin, k, k}, rng, scale));
        l.b = s.add(name + ".b", Tensor<T>({cout}));
        return l;
    }

    int forward(Binding<T>& bind, int x) const {
        return bind.graph().conv2d(x, bind.node(w), bind.node(b), stride, pad);
    }
};

template <class T>
struct LinearLayer {
    int w = -1, b = -1;

    static LinearLayer init(ParamStore<T>& s, const std::string& name, i64 din, i64 dout,
                            Rng& rng, bool bias = true, double init_gain = 1.0) {
        LinearLayer l;
        l.w = s.add(name + ".w",
                    Tensor<T>::randn({dout, din}, rng,
                                     init_gain * std::sqrt(1.0 / static_cast<double>(din))));
        if (bias) l.b = s.add(name + ".b", Tensor<T>({dout}));
        return l;
    }

    int forward(Binding<T>& bind, int x) const {
        return bind.graph().linear(x, bind.node(w), b >= 0 ? bind.node(b) : -1);
    }
};

template <class T>
struct GroupNormLayer {
    int gamma = -1, beta = -1;
    i64 groups = 1;

    static GroupNormLayer init(ParamStore<T>& s, const std::string& name, i64 channels,
                               i64 groups) {
        require(channels % groups == 0, "group_norm: channels not divisible by groups");
        GroupNormLayer l;
        l.groups = groups;
        l.gamma = s.add(name + ".gamma", Tensor<T>({channels}, T(1)));
        l.beta = s.add(name + ".beta", Tensor<T>({channels}));
        return l;
    }

    int forward(Binding<T>& bind, int x) const {
        return bind.graph().group_norm(x, bind.node(gamma), bind.node(beta), groups);
    }
};

/// Sinusoidal timestep encoding, computed outside the tape.
template <class T>
Tensor<T> sinusoidal_embedding(const std::vector<i64>& timesteps, i64 dim) {
    require(dim % 2 == 0, "sinusoidal embedding dim must be even");
    i64 n = static_cast<i64>(timesteps.size());
    Tensor<T> out({n, dim});
    i64 half = dim / 2;
    for (i64 i = 0; i < n; ++i)
        for (i64 k = 0; k < half; ++k) {
            double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) /
                                   static_cast<double>(half));
            double arg = static_cast<double>(timesteps[static_cast<std::size_t>(i)]) * freq;
            out.at(i, 2 * k) = static_cast<T>(std::sin(arg));
            out.at(i, 2 * k + 1) = static_cast<T>(std::cos(arg));
        }
    return out;
}

}  // namespace phr
