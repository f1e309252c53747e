#include <iostream>

int main() {
    std::cerr << "not yet implemented\n";
    return 1;
}
