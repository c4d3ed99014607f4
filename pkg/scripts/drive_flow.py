"""Form-following browser over an HTTP proxy, stdlib only.

Drives the demo sign-in flow end to end: point it at a running proxy and
demo site (ports as arguments) and it auto-submits each hidden form the way
a browser onload would, then asserts the session cookie sticks.
"""

import sys
import urllib.request
from html.parser import HTMLParser
from http.cookiejar import CookieJar
from urllib.parse import urlencode


class Form(HTMLParser):
    def __init__(self):
        super().__init__()
        self.action = None
        self.fields = {}

    def handle_starttag(self, tag, attrs):
        a = dict(attrs)
        if tag == "form":
            self.action = a.get("action")
        if tag == "input" and a.get("type") == "hidden":
            self.fields[a["name"]] = a.get("value", "")


def main(proxy_port: str, sp_port: str) -> None:
    jar = CookieJar()
    opener = urllib.request.build_opener(
        urllib.request.ProxyHandler({"http": f"http://127.0.0.1:{proxy_port}"}),
        urllib.request.HTTPCookieProcessor(jar),
    )

    def fetch(url, data=None):
        body = urlencode(data).encode() if data is not None else None
        with opener.open(url, body, timeout=10) as resp:
            return resp.geturl(), resp.read().decode()

    url, page = fetch(f"http://127.0.0.1:{sp_port}/")
    hops = 0
    while "<form" in page:  # auto-submit like a browser onload would
        hops += 1
        assert hops < 5, "form chain too long"
        form = Form()
        form.feed(page)
        print(f"submitting form -> {form.action} fields={sorted(form.fields)}")
        url, page = fetch(form.action, form.fields)

    print("final url:", url)
    print("cookies:", [c.name for c in jar])
    assert any(c.name == "psvc_auth" for c in jar), "no session cookie set"
    assert "authenticated as" in page, page
    url2, page2 = fetch(f"http://127.0.0.1:{sp_port}/")
    assert "authenticated as" in page2, "cookie revisit lost the session"
    print("revisit stayed signed in: OK")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
