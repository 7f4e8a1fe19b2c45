#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "longfilter/error.hpp"
#include "longfilter/rng.hpp"
#include "longfilter/types.hpp"

namespace longfilter::oracle {

/// Joint distribution p(s, e, t) over small discrete alphabets, stored
/// row-major in (s, e, t) order.
struct DiscreteJoint {
    static constexpr std::size_t max_dim = 16;

    std::size_t n_s = 0;
    std::size_t n_e = 0;
    std::size_t n_t = 0;
    std::vector<double> p;

    double operator()(std::size_t s, std::size_t e, std::size_t t) const { return p[(s * n_e + e) * n_t + t]; }
    double& operator()(std::size_t s, std::size_t e, std::size_t t) { return p[(s * n_e + e) * n_t + t]; }

    void validate() const {
        for (auto d : {n_s, n_e, n_t}) {
            if (d == 0 || d > max_dim) throw argument_error("joint dimensions must lie in [1, 16]");
        }
        if (p.size() != n_s * n_e * n_t) throw argument_error("joint table size does not match its dimensions");
        double sum = 0.0;
        for (double v : p) {
            if (!(v >= 0.0) || !std::isfinite(v)) throw argument_error("joint holds a negative or non-finite entry");
            sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-12) throw argument_error("joint does not sum to 1");
    }
};

/// Random joint with entries proportional to independent Exp(1) variates.
/// With `zero_rate` > 0 each cell is zeroed with that probability (at least
/// one cell stays positive).
inline DiscreteJoint random_joint(portable_rng& rng, std::size_t n_s, std::size_t n_e, std::size_t n_t,
                                  double zero_rate = 0.0) {
    DiscreteJoint j{n_s, n_e, n_t, std::vector<double>(n_s * n_e * n_t)};
    double sum = 0.0;
    for (auto& v : j.p) {
        v = rng.uniform() < zero_rate ? 0.0 : -std::log(rng.uniform_open_low());
        sum += v;
    }
    if (sum == 0.0) {
        j.p[0] = 1.0;
        sum = 1.0;
    }
    for (auto& v : j.p) v /= sum;
    return j;
}

inline DistTable random_distribution(portable_rng& rng, std::size_t n, double zero_rate = 0.0) {
    DistTable d;
    d.probs.resize(n);
    double sum = 0.0;
    for (auto& v : d.probs) {
        v = rng.uniform() < zero_rate ? 0.0 : -std::log(rng.uniform_open_low());
        sum += v;
    }
    if (sum == 0.0) {
        d.probs[0] = 1.0;
        sum = 1.0;
    }
    for (auto& v : d.probs) v /= sum;
    return d;
}

/// I(T; E | S) = H(T | S) - H(T | S, E), by enumeration (0 log 0 = 0).
inline double cmi_entropy_form(const DiscreteJoint& j) {
    j.validate();
    std::vector<double> p_s(j.n_s, 0.0), p_st(j.n_s * j.n_t, 0.0), p_se(j.n_s * j.n_e, 0.0);
    for (std::size_t s = 0; s < j.n_s; ++s) {
        for (std::size_t e = 0; e < j.n_e; ++e) {
            for (std::size_t t = 0; t < j.n_t; ++t) {
                const double v = j(s, e, t);
                p_s[s] += v;
                p_st[s * j.n_t + t] += v;
                p_se[s * j.n_e + e] += v;
            }
        }
    }
    double h_t_given_s = 0.0;
    for (std::size_t s = 0; s < j.n_s; ++s) {
        for (std::size_t t = 0; t < j.n_t; ++t) {
            const double v = p_st[s * j.n_t + t];
            if (v > 0.0) h_t_given_s -= v * std::log(v / p_s[s]);
        }
    }
    double h_t_given_se = 0.0;
    for (std::size_t s = 0; s < j.n_s; ++s) {
        for (std::size_t e = 0; e < j.n_e; ++e) {
            for (std::size_t t = 0; t < j.n_t; ++t) {
                const double v = j(s, e, t);
                if (v > 0.0) h_t_given_se -= v * std::log(v / p_se[s * j.n_e + e]);
            }
        }
    }
    return h_t_given_s - h_t_given_se;
}

/// I(T; E | S) = E_{p(s,e)} KL(p(T | s, e) || p(T | s)).
inline double cmi_kl_form(const DiscreteJoint& j) {
    j.validate();
    double total = 0.0;
    for (std::size_t s = 0; s < j.n_s; ++s) {
        // p(t | s) from the marginal over e.
        std::vector<double> p_t_s(j.n_t, 0.0);
        double p_s = 0.0;
        for (std::size_t e = 0; e < j.n_e; ++e) {
            for (std::size_t t = 0; t < j.n_t; ++t) p_t_s[t] += j(s, e, t);
        }
        for (double v : p_t_s) p_s += v;
        if (p_s == 0.0) continue;
        for (auto& v : p_t_s) v /= p_s;

        for (std::size_t e = 0; e < j.n_e; ++e) {
            double p_se = 0.0;
            for (std::size_t t = 0; t < j.n_t; ++t) p_se += j(s, e, t);
            if (p_se == 0.0) continue;
            double kl = 0.0;
            for (std::size_t t = 0; t < j.n_t; ++t) {
                const double post = j(s, e, t) / p_se;
                if (post > 0.0) kl += post * std::log(post / p_t_s[t]);
            }
            total += p_se * kl;
        }
    }
    return total;
}

/// KL(p_long || p_short). `infinite` is set instead of returning +inf when
/// p_short misses mass that p_long has.
struct KLResult {
    double value = 0.0;
    bool infinite = false;
};

inline KLResult one_sample_kl(const DistTable& p_long, const DistTable& p_short) {
    if (p_long.size() != p_short.size() || p_long.size() == 0) {
        throw argument_error("distributions have different supports");
    }
    KLResult r;
    for (std::size_t t = 0; t < p_long.size(); ++t) {
        const double a = p_long[t];
        const double b = p_short[t];
        if (a == 0.0) continue;
        if (b == 0.0) {
            r.infinite = true;
            continue;
        }
        r.value += a * std::log(a / b);
    }
    if (r.infinite) r.value = 0.0;
    return r;
}

/// The single-token term p_long * ln(p_long / p_short).
inline double surrogate_term(double p_long_t, double p_short_t) {
    if (!(p_long_t > 0.0 && p_long_t <= 1.0 && p_short_t > 0.0 && p_short_t <= 1.0)) {
        throw argument_error("surrogate_term needs probabilities in (0, 1]");
    }
    return p_long_t * std::log(p_long_t / p_short_t);
}

}  // namespace longfilter::oracle
