// Builds the default kernel bank and exports max-normalized previews of a
// few radius classes, plus the raw radial profile of one class.

#include <cstdio>

#include "dfl/kernel_bank.hpp"

int main() {
    const dfl::KernelBank bank = dfl::init_bank(25);
    for (int c : {2, 6, 12, 25}) {
        const std::string path = dfl::strf("kernel_c%02d.png", c);
        dfl::export_kernel_png(bank, c, path);
        std::printf("wrote %s (%dx%d, sum %.9f)\n", path.c_str(), 2 * c + 1, 2 * c + 1,
                    dfl::lookup(bank, c).sum());
    }
    std::printf("\nradial profile of the class-6 kernel (row through the center):\n");
    const dfl::Tensor& k = dfl::lookup(bank, 6);
    for (int x = 0; x < k.w; ++x) std::printf("%6.4f ", k.at(6, x));
    std::printf("\n");
    return 0;
}
