#pragma once

#include "ngfield/errors.hpp"
#include "ngfield/rng.hpp"

namespace ngfield {

// log K_nu(x): modified Bessel function of the second kind, log scale.
// Symmetric in the order (K_{-nu} = K_nu); requires x > 0.
double log_bessel_k(double order, double x);

// Generalized inverse Gaussian distribution with density proportional to
//   x^(p-1) * exp(-(a*x + b/x) / 2)   on x > 0.
// Admissible boundary cases: b = 0 needs p > 0 (Gamma), a = 0 needs p < 0
// (inverse Gamma), and p = 0 needs both a > 0 and b > 0.
struct GigParams {
  double p = 0.0;
  double a = 0.0;
  double b = 0.0;
};

// Throws InvalidParams if (p, a, b) is outside the admissible domain.
void validate_gig(const GigParams& g);

double gig_logpdf(const GigParams& g, double x);
double gig_sample(const GigParams& g, RngStream& rng);

// E[X^lambda]; throws MomentUndefined when the moment does not exist
// (possible only in the Gamma / inverse-Gamma boundary cases).
double gig_moment(const GigParams& g, double lambda);

// E[log X], via the order-derivative of log K_p in the general case.
double gig_expect_log(const GigParams& g);

namespace detail {

// log of the density's normalizing constant (the x-free part of the logpdf).
double gig_log_normalizer(const GigParams& g);

// Sampling entry point that also reports the number of rejected proposals,
// for acceptance-rate tests.
double gig_sample_counted(const GigParams& g, RngStream& rng, int* rejections);

}  // namespace detail

}  // namespace ngfield
