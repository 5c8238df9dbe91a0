#include "fx.h"

int main(void)
{
    struct sockaddr_un addr;
    int fd = socket(AF_UNIX, SOCK_STREAM, 0);
    memset(&addr, 0, sizeof addr);
    addr.sun_family = AF_UNIX;
    strcpy(addr.sun_path, getenv("SOCK_NAME"));
    bind(fd, &addr, sizeof addr);
    return 0;
}
