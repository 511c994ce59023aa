from volterra_lab.cli import app
from volterra_lab.observability import setup_observability


def main() -> None:
    # OTel export is active only when OTEL_EXPORTER_OTLP_ENDPOINT is set
    setup_observability()
    app(prog_name="volterra-lab")


if __name__ == "__main__":
    main()
