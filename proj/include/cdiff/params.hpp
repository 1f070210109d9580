#pragma once

#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cdiff/tensor.hpp"

namespace cdiff {

// Owns named model parameters with stable (insertion) iteration order.
// Checkpoints, optimizers and trainability masks all key off the names.
template <typename T>
class ParamStoreT {
  public:
    ParamStoreT() = default;
    ParamStoreT(const ParamStoreT&) = delete;
    ParamStoreT& operator=(const ParamStoreT&) = delete;
    ParamStoreT(ParamStoreT&&) = default;
    ParamStoreT& operator=(ParamStoreT&&) = default;

    ParameterT<T>& create(const std::string& name, TensorT<T> init, bool trainable = true) {
        if (index_.count(name)) fail("params", "duplicate parameter name " + name);
        auto p = std::make_unique<ParameterT<T>>();
        p->name = name;
        p->value = std::move(init);
        p->trainable = trainable;
        index_[name] = params_.size();
        params_.push_back(std::move(p));
        return *params_.back();
    }

    ParameterT<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) fail("params", "unknown parameter " + name);
        return *params_[it->second];
    }
    const ParameterT<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) fail("params", "unknown parameter " + name);
        return *params_[it->second];
    }
    bool has(const std::string& name) const { return index_.count(name) != 0; }

    std::vector<ParameterT<T>*> all() {
        std::vector<ParameterT<T>*> out;
        for (auto& p : params_) out.push_back(p.get());
        return out;
    }
    std::vector<const ParameterT<T>*> all() const {
        std::vector<const ParameterT<T>*> out;
        for (auto& p : params_) out.push_back(p.get());
        return out;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (auto& p : params_) out.push_back(p->name);
        return out;
    }

    // Marks exactly the parameters accepted by the predicate trainable.
    void set_trainable(const std::function<bool(const std::string&)>& pred) {
        for (auto& p : params_) p->trainable = pred(p->name);
    }

    std::vector<std::string> trainable_names() const {
        std::vector<std::string> out;
        for (auto& p : params_)
            if (p->trainable) out.push_back(p->name);
        return out;
    }

    int64_t total_elements() const {
        int64_t n = 0;
        for (auto& p : params_) n += p->value.numel();
        return n;
    }

    // Order-sensitive digest of a subset of parameter values; used to prove
    // frozen weights stay untouched across training steps.
    uint64_t checksum(const std::function<bool(const std::string&)>& pred) const {
        uint64_t h = 0x9e3779b97f4a7c15ull;
        for (auto& p : params_) {
            if (!pred(p->name)) continue;
            h = hash64(h, hash64_str(p->name));
            for (T v : p->value.data) {
                uint64_t bits = 0;
                if constexpr (sizeof(T) == 4) {
                    uint32_t b32;
                    std::memcpy(&b32, &v, 4);
                    bits = b32;
                } else {
                    std::memcpy(&bits, &v, 8);
                }
                h = hash64(h, bits);
            }
        }
        return h;
    }

  private:
    std::vector<std::unique_ptr<ParameterT<T>>> params_;
    std::map<std::string, size_t> index_;
};

using ParamStore = ParamStoreT<float>;

}  // namespace cdiff
