#include "fx.h"

int main(void)
{
    struct sockaddr_un addr;
    int fd = socket(AF_UNIX, SOCK_STREAM, 0);
    memset(&addr, 0, sizeof addr);
    addr.sun_family = AF_UNIX;
    snprintf(addr.sun_path, sizeof addr.sun_path, "/dev/socket/%s", "nims");
    bind(fd, &addr, sizeof addr);
    listen(fd, 8);
    return 0;
}
