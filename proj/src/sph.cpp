#include "tsph/sph.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace tsph::sph {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kFourThirdsPi = 4.0 * kPi / 3.0;

void require_positive_h(double h) {
  if (!(h > 0.0) || !std::isfinite(h)) {
    throw DomainError("kernel: smoothing length must be positive, got " + std::to_string(h));
  }
}

double pressure_factor(const Particle& p, double gamma) {
  if (!(p.rho > 0.0) || !std::isfinite(p.rho) || !std::isfinite(p.omega) || p.omega == 0.0) {
    throw DomainError("force: particle " + std::to_string(p.id) +
                      " has no valid density (density phase not complete)");
  }
  return pressure(p, gamma) / (p.omega * p.rho * p.rho);
}

}  // namespace

void SphConfig::validate() const {
  if (!(gamma > 1.0)) throw ConfigError("gamma must exceed 1");
  if (!(eta_neigh > 0.0)) throw ConfigError("eta_neigh must be positive");
  if (!(h_tolerance > 0.0 && h_tolerance < 1.0)) throw ConfigError("h_tolerance must lie in (0, 1)");
  if (h_max_iter < 1) throw ConfigError("h_max_iter must be at least 1");
  if (!(cfl > 0.0)) throw ConfigError("cfl must be positive");
  if (!(u_floor > 0.0)) throw ConfigError("u_floor must be positive");
}

KernelValue kernel_eval(double r, double h) {
  require_positive_h(h);
  const double q = r / h;
  if (q >= 1.0) return {};
  const double sigma = 8.0 / (kPi * h * h * h);
  if (q < 0.5) {
    return {sigma * (1.0 - 6.0 * q * q + 6.0 * q * q * q), sigma * (-12.0 * q + 18.0 * q * q) / h};
  }
  const double s = 1.0 - q;
  return {sigma * 2.0 * s * s * s, sigma * (-6.0 * s * s) / h};
}

double kernel_dh(double r, double h) {
  const auto k = kernel_eval(r, h);
  return -(3.0 * k.w + r * k.dw_dr) / h;
}

double interpolate_quantity(const Vec3& point, std::span<const double> field,
                            std::span<const Particle> particles, double h) {
  if (field.size() != particles.size()) {
    throw DomainError("interpolate: field and particle counts differ");
  }
  require_positive_h(h);
  double sum = 0.0;
  for (std::size_t i = 0; i < particles.size(); ++i) {
    const auto& p = particles[i];
    const double r = norm(point - p.x);
    if (r >= h) continue;
    if (p.rho == 0.0) {
      throw DomainError("interpolate: particle " + std::to_string(p.id) + " has zero density");
    }
    sum += p.m * (field[i] / p.rho) * kernel_eval(r, h).w;
  }
  return sum;
}

void reset_density(Particle& p) {
  p.rho = 0.0;
  p.rho_dh = 0.0;
  p.n_neigh = 0.0;
  p.n_neigh_dh = 0.0;
}

void reset_force(Particle& p) {
  p.a = {};
  p.u_dot = 0.0;
}

void density_accumulate(Particle& pi, double mj, double r) {
  const double h = pi.h;
  const auto k = kernel_eval(r, h);
  pi.rho += mj * k.w;
  pi.rho_dh += mj * (-(3.0 * k.w + r * k.dw_dr) / h);
  pi.n_neigh += kFourThirdsPi * h * h * h * k.w;
  pi.n_neigh_dh += kFourThirdsPi * (-h * h * r * k.dw_dr);
}

double pressure(const Particle& p, double gamma) { return p.rho * p.u * (gamma - 1.0); }

void finalize_density(Particle& p) { p.omega = 1.0 + p.h / (3.0 * p.rho) * p.rho_dh; }

AdaptResult adapt_smoothing(Particle& p, const SphConfig& cfg,
                            const std::function<void(Particle&)>& recompute, double h_limit) {
  AdaptResult result;
  const double h_top = std::min(cfg.h_max, h_limit);

  // Moves p to h_new. Returns false when the caller cannot evaluate there.
  auto move_to = [&](double h_new) {
    if (h_new > h_limit && h_limit < cfg.h_max) {
      p.h = std::min(h_new, cfg.h_max);
      result.status = AdaptStatus::kNeedsRebuild;
      return false;
    }
    p.h = h_new;
    recompute(p);
    ++result.iterations;
    return true;
  };

  for (int it = 0; it < cfg.h_max_iter; ++it) {
    const double f = p.n_neigh - cfg.eta_neigh;
    double dh;
    if (p.n_neigh_dh > 0.0) {
      dh = -f / p.n_neigh_dh;
    } else {
      dh = f < 0.0 ? p.h : -0.5 * p.h;
    }
    dh = std::clamp(dh, -0.5 * p.h, p.h);
    if (std::abs(dh) <= cfg.h_tolerance * p.h) {
      finalize_density(p);
      return result;
    }
    double h_new = p.h + dh;
    if (h_new > cfg.h_max) {
      if (p.h >= cfg.h_max) break;
      h_new = cfg.h_max;
    }
    if (!move_to(h_new)) return result;
  }

  // Newton did not settle: bracket the root and bisect.
  double lo = p.h, hi = p.h;
  if (p.n_neigh < cfg.eta_neigh) {
    for (int grow = 0; p.n_neigh < cfg.eta_neigh; ++grow) {
      if (hi >= h_top || grow > 60) {
        if (h_top < cfg.h_max && hi >= h_top) {
          p.h = std::min(2.0 * hi, cfg.h_max);
          result.status = AdaptStatus::kNeedsRebuild;
          return result;
        }
        throw DomainError("smoothing length of particle " + std::to_string(p.id) +
                          " did not converge: neighbour target unreachable below h_max = " +
                          std::to_string(cfg.h_max));
      }
      lo = hi;
      hi = std::min(2.0 * hi, h_top);
      if (!move_to(hi)) return result;
    }
  } else {
    const double h_start = p.h;
    while (p.n_neigh >= cfg.eta_neigh) {
      hi = lo;
      lo = 0.5 * lo;
      if (lo < 1e-9 * h_start) {
        throw DomainError("smoothing length of particle " + std::to_string(p.id) +
                          " did not converge: neighbour count never drops below target");
      }
      if (!move_to(lo)) return result;
    }
  }
  for (int it = 0; it < 200 && (hi - lo) > cfg.h_tolerance * lo; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (!move_to(mid)) return result;
    if (p.n_neigh < cfg.eta_neigh) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  if (p.h != hi) {
    if (!move_to(hi)) return result;
  }
  if (!(p.rho > 0.0)) {
    throw DomainError("smoothing length of particle " + std::to_string(p.id) + " did not converge");
  }
  finalize_density(p);
  return result;
}

Vec3 pair_pressure_term(const Particle& pi, const Particle& pj, const Vec3& dx, double gamma) {
  const double r = norm(dx);
  if (r == 0.0) return {};
  const double ci = pressure_factor(pi, gamma);
  const double cj = pressure_factor(pj, gamma);
  const double wi = kernel_eval(r, pi.h).dw_dr;
  const double wj = kernel_eval(r, pj.h).dw_dr;
  const double c = ci * wi + cj * wj;
  return dx * (c / r);
}

void force_accumulate(Particle& pi, Particle& pj, const Vec3& dx, double gamma) {
  const double r = norm(dx);
  if (r == 0.0) return;
  const double ci = pressure_factor(pi, gamma);
  const double cj = pressure_factor(pj, gamma);
  const double wi = kernel_eval(r, pi.h).dw_dr;
  const double wj = kernel_eval(r, pj.h).dw_dr;
  const Vec3 term = dx * ((ci * wi + cj * wj) / r);
  pi.a -= pj.m * term;
  pj.a += pi.m * term;
  const double dvdx = dot(pi.v - pj.v, dx) / r;
  pi.u_dot += ci * pj.m * dvdx * wi;
  pj.u_dot += cj * pi.m * dvdx * wj;
}

void force_accumulate_one_sided(Particle& pi, const Particle& pj, const Vec3& dx, double gamma) {
  const double r = norm(dx);
  if (r == 0.0) return;
  const double ci = pressure_factor(pi, gamma);
  const double cj = pressure_factor(pj, gamma);
  const double wi = kernel_eval(r, pi.h).dw_dr;
  const double wj = kernel_eval(r, pj.h).dw_dr;
  const Vec3 term = dx * ((ci * wi + cj * wj) / r);
  pi.a -= pj.m * term;
  const double dvdx = dot(pi.v - pj.v, dx) / r;
  pi.u_dot += ci * pj.m * dvdx * wi;
}

double wrap(double x, double length) {
  double w = x - length * std::floor(x / length);
  if (w >= length) w = 0.0;
  if (w < 0.0) w = 0.0;
  return w;
}

Vec3 wrap(const Vec3& x, const Vec3& box) {
  return {wrap(x.x, box.x), wrap(x.y, box.y), wrap(x.z, box.z)};
}

Vec3 min_image(const Vec3& a, const Vec3& b, const Vec3& box) {
  Vec3 d = a - b;
  for (int k = 0; k < 3; ++k) {
    if (d[k] > 0.5 * box[k]) {
      d[k] -= box[k];
    } else if (d[k] < -0.5 * box[k]) {
      d[k] += box[k];
    }
  }
  return d;
}

void kick(Particle& p, double dt, const Vec3& box, double u_floor) {
  if (!(dt > 0.0)) throw DomainError("kick: timestep must be positive");
  if (p.kicked) {
    p.v += (p.a - p.a_prev) * (0.5 * dt);
  }
  const Vec3 v_half = p.v + p.a * (0.5 * dt);
  p.x = wrap(p.x + v_half * dt, box);
  p.v = v_half + p.a * (0.5 * dt);
  p.a_prev = p.a;
  p.kicked = true;
  p.u = std::max(p.u + p.u_dot * dt, u_floor);
}

double cfl_timestep(std::span<const Particle> particles, const SphConfig& cfg) {
  double dt = std::numeric_limits<double>::infinity();
  for (const auto& p : particles) {
    const double cs = std::sqrt(cfg.gamma * (cfg.gamma - 1.0) * p.u);
    if (cs > 0.0) dt = std::min(dt, p.h / cs);
  }
  if (!std::isfinite(dt)) throw DomainError("cfl_timestep: no particle with positive sound speed");
  return cfg.cfl * dt;
}

}  // namespace tsph::sph
