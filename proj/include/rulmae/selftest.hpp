#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace rulmae {

struct CheckResult {
  std::string name;
  bool ok = false;
  std::string detail;
};

// Central-finite-difference validation of every layer kernel, plus a
// sign-flipped negative control that must fail.
std::vector<CheckResult> gradient_checks();

// Full autoencoder loss differentiated against every parameter group at
// reduced dims (d=8, H=2, P=10, J=2).
CheckResult end_to_end_grad_check();

// Softmax/normalization/optimizer/positional-embedding identities.
std::vector<CheckResult> numeric_invariant_checks();

// Patch counts, mask arithmetic and mask/unmask partitions over seeded draws.
std::vector<CheckResult> partition_checks(std::size_t draws);

// Runs everything above, one [PASS]/[FAIL] line per check.
bool run_selftest(std::ostream& out);

}  // namespace rulmae
