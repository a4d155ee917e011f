#pragma once

#include <json.hpp>

#include "ion/errors.hpp"
#include "ion/types.hpp"

namespace ion::jsonu {

inline nlohmann::json from_vec(const Vec& v) {
    nlohmann::json a = nlohmann::json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

inline nlohmann::json from_mat(const Mat& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(row);
    }
    return rows;
}

inline Vec to_vec(const nlohmann::json& a) {
    if (!a.is_array()) throw StoreError("expected a JSON array for a vector");
    Vec v(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].is_null()) {
            v(static_cast<Eigen::Index>(i)) = std::numeric_limits<double>::quiet_NaN();
        } else {
            v(static_cast<Eigen::Index>(i)) = a[i].get<double>();
        }
    }
    return v;
}

inline Mat to_mat(const nlohmann::json& a) {
    if (!a.is_array() || a.empty() || !a[0].is_array())
        throw StoreError("expected a JSON array of arrays for a matrix");
    Mat m(a.size(), a[0].size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].size() != a[0].size())
            throw StoreError("ragged JSON matrix");
        for (std::size_t j = 0; j < a[i].size(); ++j)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                a[i][j].get<double>();
    }
    return m;
}

// JSON has no NaN literal; nlohmann dumps NaN as null.  Read it back.
inline double to_double_or_nan(const nlohmann::json& v) {
    return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
}

} // namespace ion::jsonu
