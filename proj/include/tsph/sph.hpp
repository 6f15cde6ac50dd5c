#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>

#include "tsph/common.hpp"

namespace tsph::sph {

struct Particle {
  std::uint64_t id = 0;
  Vec3 x;
  Vec3 v;
  double u = 1.0;
  double m = 1.0;
  double h = 0.1;

  // Density-phase accumulators.
  double rho = 0.0;
  double rho_dh = 0.0;
  double n_neigh = 0.0;
  double n_neigh_dh = 0.0;
  double omega = 1.0;

  // Force-phase accumulators.
  Vec3 a;
  double u_dot = 0.0;

  // Acceleration of the previous kick; closes the leapfrog half-step.
  Vec3 a_prev;
  bool kicked = false;
};

struct SphConfig {
  double gamma = 5.0 / 3.0;
  double eta_neigh = 48.0;
  double h_tolerance = 1e-4;
  int h_max_iter = 30;
  double cfl = 0.1;
  double dt = 0.0;
  // Largest admissible smoothing length; no solution below it is an error.
  double h_max = std::numeric_limits<double>::infinity();
  double u_floor = 1e-12;

  void validate() const;
};

struct KernelValue {
  double w = 0.0;
  double dw_dr = 0.0;
};

// Cubic spline (M4) with compact support radius exactly h.
KernelValue kernel_eval(double r, double h);

// Partial derivative of the kernel with respect to h at fixed r.
double kernel_dh(double r, double h);

// Kernel-weighted interpolation Q(point) = sum_i m_i Q_i / rho_i W(|point - x_i|, h).
double interpolate_quantity(const Vec3& point, std::span<const double> field,
                            std::span<const Particle> particles, double h);

void reset_density(Particle& p);
void reset_force(Particle& p);

// Adds the contribution of a neighbour of mass mj at distance r (< pi.h) to
// pi's density accumulators. Call with r = 0 and pi's own mass for the self term.
void density_accumulate(Particle& pi, double mj, double r);
inline void density_accumulate(Particle& pi, const Particle& pj, double r) {
  density_accumulate(pi, pj.m, r);
}

double pressure(const Particle& p, double gamma);

enum class AdaptStatus { kConverged, kNeedsRebuild };

struct AdaptResult {
  AdaptStatus status = AdaptStatus::kConverged;
  int iterations = 0;
};

// Newton-Raphson on n_neigh(h) - eta_neigh. `recompute` must zero and rebuild
// the density accumulators of the particle for its current h. `h_limit` is the
// largest h the caller can recompute a density for; wanting more than that
// (but no more than cfg.h_max) yields kNeedsRebuild with p.h set to the
// desired value. Non-convergence below cfg.h_max throws DomainError.
AdaptResult adapt_smoothing(Particle& p, const SphConfig& cfg,
                            const std::function<void(Particle&)>& recompute,
                            double h_limit = std::numeric_limits<double>::infinity());

// Omega = 1 + h / (3 rho) * drho/dh.
void finalize_density(Particle& p);

// Shared bracket of the momentum equation for the pair (i, j), times the
// separation direction: [P_i/(O_i rho_i^2) W'(r,h_i) + P_j/(O_j rho_j^2) W'(r,h_j)] dx/r.
// dx = x_i - x_j. Swapping i and j (and negating dx) negates the result exactly.
Vec3 pair_pressure_term(const Particle& pi, const Particle& pj, const Vec3& dx, double gamma);

// Symmetric update of both particles' a and u_dot. dx = x_i - x_j, and
// |dx| < max(h_i, h_j).
void force_accumulate(Particle& pi, Particle& pj, const Vec3& dx, double gamma);

// Update of pi only, for pairs whose j side belongs to another rank.
void force_accumulate_one_sided(Particle& pi, const Particle& pj, const Vec3& dx, double gamma);

// Kick-drift-kick leapfrog. Stored v is the full-step velocity predicted with
// the previous acceleration; the first call starts from the given v.
void kick(Particle& p, double dt, const Vec3& box, double u_floor);

// Wraps a coordinate into [0, L).
double wrap(double x, double length);
Vec3 wrap(const Vec3& x, const Vec3& box);

// Minimum-image separation vector a - b in a periodic box.
Vec3 min_image(const Vec3& a, const Vec3& b, const Vec3& box);

// cfl * min_i h_i / c_s,i with c_s = sqrt(gamma (gamma - 1) u).
double cfl_timestep(std::span<const Particle> particles, const SphConfig& cfg);

}  // namespace tsph::sph
