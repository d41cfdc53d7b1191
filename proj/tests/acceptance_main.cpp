#include "aes/aes.hpp"
int main() { return 0; }
