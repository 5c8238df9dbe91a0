#include "fx.h"

int main(void)
{
    int fd = socket_local_server("fmhal_sock", ANDROID_SOCKET_NAMESPACE_ABSTRACT, SOCK_STREAM);
    return fd < 0;
}
