#ifndef DOME_OPTIM_HPP
#define DOME_OPTIM_HPP

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "dome/io.hpp"
#include "dome/tensor.hpp"

namespace dome {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Named parameter registry with AdamW state and EMA shadows. Iteration is
// by name (std::map), so update order and checkpoint layout are
// deterministic.
template <typename R>
class ParameterStore {
public:
    Tensor<R> add(const std::string& name, Tensor<R> t) {
        if (params_.count(name))
            throw std::invalid_argument(str("parameter store: duplicate name ", name));
        t.set_requires_grad(true);
        Entry e;
        e.param = t;
        e.m.assign(t.numel(), R(0));
        e.v.assign(t.numel(), R(0));
        e.ema = t.values();
        params_.emplace(name, std::move(e));
        return t;
    }

    bool has(const std::string& name) const { return params_.count(name) != 0; }

    Tensor<R> get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end())
            throw std::invalid_argument(str("parameter store: unknown name ", name));
        return it->second.param;
    }

    size_t size() const { return params_.size(); }

    size_t total_elements() const {
        size_t n = 0;
        for (const auto& [name, e] : params_) n += e.param.numel();
        return n;
    }

    template <typename Fn>
    void for_each(Fn fn) {
        for (auto& [name, e] : params_) fn(name, e.param);
    }
    template <typename Fn>
    void for_each(Fn fn) const {
        for (const auto& [name, e] : params_) fn(name, e.param);
    }

    void zero_grad() {
        for (auto& [name, e] : params_) e.param.zero_grad();
    }

    // Decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
    void adamw_step(const AdamWConfig& cfg) {
        if (cfg.lr <= 0) throw std::invalid_argument("adamw_step: lr must be positive");
        ++step_;
        double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
        double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
        for (auto& [name, e] : params_) {
            auto& p = e.param.values();
            const auto& g = e.param.grad();
            for (size_t i = 0; i < p.size(); ++i) {
                double gi = static_cast<double>(g[i]);
                double m = cfg.beta1 * static_cast<double>(e.m[i]) + (1.0 - cfg.beta1) * gi;
                double v = cfg.beta2 * static_cast<double>(e.v[i]) + (1.0 - cfg.beta2) * gi * gi;
                e.m[i] = static_cast<R>(m);
                e.v[i] = static_cast<R>(v);
                double m_hat = m / bc1;
                double v_hat = v / bc2;
                double upd = m_hat / (std::sqrt(v_hat) + cfg.eps) +
                             cfg.weight_decay * static_cast<double>(p[i]);
                p[i] = static_cast<R>(static_cast<double>(p[i]) - cfg.lr * upd);
            }
        }
    }

    void ema_update(double decay) {
        if (decay < 0.0 || decay > 1.0)
            throw std::invalid_argument("ema_update: decay must be in [0,1]");
        for (auto& [name, e] : params_) {
            const auto& p = e.param.values();
            for (size_t i = 0; i < p.size(); ++i)
                e.ema[i] = static_cast<R>(decay * static_cast<double>(e.ema[i]) +
                                          (1.0 - decay) * static_cast<double>(p[i]));
        }
    }

    // Swaps EMA shadows into the live parameters (and the old values into
    // the shadows), so a second call restores training weights.
    void swap_ema() {
        for (auto& [name, e] : params_) std::swap(e.param.values(), e.ema);
    }

    int64_t step_count() const { return step_; }

    // --- checkpoint archive ---
    // Payloads are stored as f32, so double stores round-trip at float
    // precision; reloading the file into two models leaves them identical.

    void save(const std::string& path, bool include_ema = true) const {
        auto os = open_out(path);
        os.write("DOMEckpt", 8);
        write_u16(os, kVersion);
        uint32_t count = static_cast<uint32_t>(params_.size() * (include_ema ? 2 : 1));
        write_u32(os, count);
        for (const auto& [name, e] : params_) write_tensor(os, name, e.param.shape(), e.param.values());
        if (include_ema)
            for (const auto& [name, e] : params_)
                write_tensor(os, "ema/" + name, e.param.shape(), e.ema);
        if (!os) throw FormatError(FormatErrorCode::OpenFailed, str("writing ", path));
    }

    // Loads values by name into existing parameters (and "ema/" entries
    // into shadows). Unknown names in the file are an error; parameters
    // missing from the file keep their values.
    void load(const std::string& path) {
        auto is = open_in(path);
        expect_magic(is, "DOMEckpt", 8, path);
        uint16_t ver = read_u16(is, "checkpoint version");
        if (ver != kVersion)
            throw FormatError(FormatErrorCode::BadVersion,
                              str("checkpoint version ", ver, ", expected ", kVersion));
        uint32_t count = read_u32(is, "checkpoint tensor count");
        for (uint32_t t = 0; t < count; ++t) {
            uint32_t name_len = read_u32(is, "tensor name length");
            if (name_len > 4096)
                throw FormatError(FormatErrorCode::Corrupt, str("name length ", name_len));
            std::string name(name_len, '\0');
            read_bytes(is, name.data(), name_len, "tensor name");
            uint8_t rank8 = 0;
            read_bytes(is, &rank8, 1, "tensor rank");
            Shape shape(rank8);
            size_t numel = 1;
            for (auto& d : shape) {
                d = static_cast<int>(read_u32(is, "tensor dim"));
                numel *= static_cast<size_t>(d);
            }
            std::vector<float> payload(numel);
            for (auto& v : payload) v = read_f32(is, "tensor payload");

            bool is_ema = name.rfind("ema/", 0) == 0;
            std::string base = is_ema ? name.substr(4) : name;
            auto it = params_.find(base);
            if (it == params_.end())
                throw FormatError(FormatErrorCode::Corrupt,
                                  str("checkpoint names unknown parameter ", name));
            if (it->second.param.shape() != shape)
                throw FormatError(FormatErrorCode::Corrupt,
                                  str("shape mismatch for ", name, ": file ", shape_str(shape),
                                      " vs store ", shape_str(it->second.param.shape())));
            auto& dst = is_ema ? it->second.ema : it->second.param.values();
            for (size_t i = 0; i < numel; ++i) dst[i] = static_cast<R>(payload[i]);
        }
    }

private:
    static constexpr uint16_t kVersion = 1;

    struct Entry {
        Tensor<R> param;
        std::vector<R> m, v;
        std::vector<R> ema;
    };

    static void write_tensor(std::ostream& os, const std::string& name, const Shape& shape,
                             const std::vector<R>& data) {
        write_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        uint8_t rank8 = static_cast<uint8_t>(shape.size());
        os.write(reinterpret_cast<const char*>(&rank8), 1);
        for (int d : shape) write_u32(os, static_cast<uint32_t>(d));
        for (R v : data) write_f32(os, static_cast<float>(v));
    }

    std::map<std::string, Entry> params_;
    int64_t step_ = 0;
};

// cosine_lr(0) = base_lr, cosine_lr(total) = min_lr, half-period cosine.
inline double cosine_lr(int64_t step, int64_t total, double base_lr, double min_lr = 0.0) {
    if (total <= 0) return base_lr;
    if (step < 0) step = 0;
    if (step > total) step = total;
    double t = static_cast<double>(step) / static_cast<double>(total);
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(3.14159265358979323846 * t));
}

}  // namespace dome

#endif  // DOME_OPTIM_HPP
