#pragma once

// Brute-force reference implementations used as oracles by the tests.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace oracle {

// Every positive/negative pair, ties worth one half.
inline double auroc_pairs(std::span<const double> s, std::span<const int> y) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (y[i] != 1) continue;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (y[j] != 0) continue;
            den += 1.0;
            if (s[i] > s[j]) num += 1.0;
            else if (s[i] == s[j]) num += 0.5;
        }
    }
    if (den == 0.0) throw std::invalid_argument("single class");
    return num / den;
}

// Harrell: (i, j) comparable when t_i < t_j and i had the event.
inline double cindex_pairs(std::span<const double> risk, std::span<const double> t, std::span<const int> e) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (e[i] != 1) continue;
        for (std::size_t j = 0; j < t.size(); ++j) {
            if (!(t[i] < t[j])) continue;
            den += 1.0;
            if (risk[i] > risk[j]) num += 1.0;
            else if (risk[i] == risk[j]) num += 0.5;
        }
    }
    if (den == 0.0) throw std::invalid_argument("no comparable pairs");
    return num / den;
}

inline double entropy(std::span<const double> p) {
    double h = 0.0;
    for (double v : p)
        if (v > 0) h -= v * std::log(v);
    return h;
}

}  // namespace oracle
