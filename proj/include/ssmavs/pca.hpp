#pragma once

#include "ssmavs/tensor.hpp"

namespace ssmavs {

/// First principal component of the rows of a [P,C] matrix as a [C] unit
/// vector, computed by power iteration on the channel covariance (100
/// iterations, tolerance 1e-8). Zero-variance input yields the zero vector.
/// The entry with the largest magnitude is made positive so the sign is
/// reproducible.
Tensor principal_component(const Tensor& rows);

/// Projection of each row onto the component: [P,C] x [C] -> [P].
Tensor pca_project(const Tensor& rows, const Tensor& component);

}  // namespace ssmavs
