#include "fx.h"

int main(void)
{
    int s = socket(AF_UNIX, SOCK_STREAM, 0);
    int fd = socket_local_server_bind(s, "/data/misc/fs_sock", ANDROID_SOCKET_NAMESPACE_FILESYSTEM);
    return fd < 0;
}
